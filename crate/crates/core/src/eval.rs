//! BIOES repair, exact-match scoring and false-positive taxonomy.
//!
//! The taxonomy is a deterministic rule-based approximation of a manual
//! error analysis; reports label it as such.

use std::fmt;

use crate::corpus::bioes_to_spans;
use crate::{Span, Tag};

/// Rewrites every maximal non-`O` run that is not `S` or `B I* E` to `O`.
/// Valid runs are left alone, so the output is always valid BIOES.
pub fn repair_bioes(tags: &[Tag]) -> Vec<Tag> {
    let mut out = tags.to_vec();
    let mut i = 0;
    while i < tags.len() {
        if tags[i] == Tag::O {
            i += 1;
            continue;
        }
        let start = i;
        while i < tags.len() && tags[i] != Tag::O {
            i += 1;
        }
        let run = &tags[start..i];
        if !run_is_valid(run) {
            out[start..i].iter_mut().for_each(|t| *t = Tag::O);
        }
    }
    out
}

/// A run without `O` is valid when it is a concatenation of `S` and
/// `B I* E` chunks.
fn run_is_valid(run: &[Tag]) -> bool {
    bioes_to_spans(run).is_ok()
}

/// Micro-averaged exact-match counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    /// Correct predictions.
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl MatchCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn merge(&mut self, other: MatchCounts) {
        self.correct += other.correct;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Exact `(start, end)` matches summed over sentences.
pub fn exact_match_score(pred: &[Vec<Span>], gold: &[Vec<Span>]) -> MatchCounts {
    assert_eq!(pred.len(), gold.len(), "one span list per sentence");
    let mut counts = MatchCounts::default();
    for (p, g) in pred.iter().zip(gold) {
        counts.predicted += p.len();
        counts.gold += g.len();
        counts.correct += p.iter().filter(|s| g.contains(s)).count();
    }
    counts
}

/// False positives by cause, plus false negatives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Taxonomy {
    /// Predictions that coincide with or overlap an entity of another type.
    pub bio_entity: usize,
    /// Predictions overlapping a same-type gold entity with other boundaries.
    pub span: usize,
    pub other: usize,
    /// Gold entities overlapped by some wrong prediction.
    pub fn_span: usize,
    /// Gold entities with no overlapping prediction at all.
    pub fn_missed: usize,
}

impl Taxonomy {
    pub fn false_positives(&self) -> usize {
        self.bio_entity + self.span + self.other
    }

    pub fn false_negatives(&self) -> usize {
        self.fn_span + self.fn_missed
    }

    pub fn merge(&mut self, o: Taxonomy) {
        self.bio_entity += o.bio_entity;
        self.span += o.span;
        self.other += o.other;
        self.fn_span += o.fn_span;
        self.fn_missed += o.fn_missed;
    }
}

/// Classifies each false positive by the first matching rule: bio-entity
/// (touches another type's span), then span (touches a same-type gold span),
/// then other.
pub fn classify_errors(pred: &[Vec<Span>], gold: &[Vec<Span>], other_type: &[Vec<Span>]) -> Taxonomy {
    assert!(pred.len() == gold.len() && gold.len() == other_type.len(), "one span list per sentence");
    let mut tax = Taxonomy::default();
    for ((p, g), o) in pred.iter().zip(gold).zip(other_type) {
        for fp in p.iter().filter(|s| !g.contains(s)) {
            if o.iter().any(|x| x.overlaps(fp)) {
                tax.bio_entity += 1;
            } else if g.iter().any(|x| x.overlaps(fp)) {
                tax.span += 1;
            } else {
                tax.other += 1;
            }
        }
        for fnn in g.iter().filter(|s| !p.contains(s)) {
            if p.iter().any(|x| x.overlaps(fnn)) {
                tax.fn_span += 1;
            } else {
                tax.fn_missed += 1;
            }
        }
    }
    tax
}

/// Scores plus error taxonomy for one split.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalReport {
    pub counts: MatchCounts,
    pub taxonomy: Taxonomy,
}

impl EvalReport {
    pub fn new(pred: &[Vec<Span>], gold: &[Vec<Span>], other_type: &[Vec<Span>]) -> Self {
        Self {
            counts: exact_match_score(pred, gold),
            taxonomy: classify_errors(pred, gold, other_type),
        }
    }

    pub fn precision(&self) -> f64 {
        self.counts.precision()
    }

    pub fn recall(&self) -> f64 {
        self.counts.recall()
    }

    pub fn f1(&self) -> f64 {
        self.counts.f1()
    }

    /// `metric=value` lines.
    pub fn summary(&self) -> String {
        let c = &self.counts;
        let t = &self.taxonomy;
        format!(
            "correct={}\npredicted={}\ngold={}\nprecision={:.6}\nrecall={:.6}\nf1={:.6}\n\
             fp_bio_entity={}\nfp_span={}\nfp_other={}\nfn_span={}\nfn_missed={}\ntaxonomy=rule-based-approximation\n",
            c.correct,
            c.predicted,
            c.gold,
            c.precision(),
            c.recall(),
            c.f1(),
            t.bio_entity,
            t.span,
            t.other,
            t.fn_span,
            t.fn_missed
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.taxonomy;
        write!(
            f,
            "P={:.4} R={:.4} F1={:.4} C={} M={} N={} | FP bio-entity={} span={} other={} | FN span={} missed={} (rule-based taxonomy)",
            self.precision(),
            self.recall(),
            self.f1(),
            self.counts.correct,
            self.counts.predicted,
            self.counts.gold,
            t.bio_entity,
            t.span,
            t.other,
            t.fn_span,
            t.fn_missed
        )
    }
}

/// Spans after repair; decoding output can be any tag sequence.
pub fn repaired_spans(tags: &[Tag]) -> Vec<Span> {
    bioes_to_spans(&repair_bioes(tags)).expect("repaired sequences are valid")
}

/// Lenient reading of an unrepaired sequence: every `S`, and every `B I* E`
/// chunk, even inside an otherwise broken run.
pub fn raw_spans(tags: &[Tag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            Tag::S => {
                spans.push(Span::new(i, i));
                open = None;
            }
            Tag::B => open = Some(i),
            Tag::I => {}
            Tag::E => {
                if let Some(s) = open.take() {
                    spans.push(Span::new(s, i));
                }
            }
            Tag::O => open = None,
        }
    }
    spans
}
