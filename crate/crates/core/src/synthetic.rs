//! Generated corpora for smoke tests and the polysemy experiment.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{bioes_to_spans, DatasetBundle, EntityType, LabeledSentence};
use crate::rng;
use crate::{Span, Tag};

fn words(prefix: &str, n: usize) -> Vec<String> {
    const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ru", "te", "so", "vi", "na", "pe", "zu", "do", "ha"];
    (0..n)
        .map(|i| {
            let a = SYLLABLES[i % SYLLABLES.len()];
            let b = SYLLABLES[(i / SYLLABLES.len() + i * 5 + prefix.len()) % SYLLABLES.len()];
            format!("{prefix}{a}{b}{i}")
        })
        .collect()
}

/// Single-type corpus of `n` sentences over a 40-word vocabulary: 10 entity
/// words that only ever occur inside entities and 30 context words. Entities
/// are one or two tokens long.
pub fn overfit_corpus(seed: u64, n: usize) -> Vec<LabeledSentence> {
    let entity = words("ent", 10);
    let context = words("w", 30);
    let mut r = rng::stream(seed, "synthetic.overfit", &[]);
    (0..n)
        .map(|_| {
            let mut tokens = Vec::new();
            let mut tags = Vec::new();
            let len = r.gen_range(4..=10);
            while tokens.len() < len {
                if r.gen_bool(0.25) {
                    let two = r.gen_bool(0.3);
                    tokens.push(entity.choose(&mut r).unwrap().clone());
                    if two {
                        tokens.push(entity.choose(&mut r).unwrap().clone());
                        tags.extend([Tag::B, Tag::E]);
                    } else {
                        tags.push(Tag::S);
                    }
                }
                tokens.push(context.choose(&mut r).unwrap().clone());
                tags.push(Tag::O);
            }
            LabeledSentence::new(tokens, tags, "synthetic").expect("nonempty")
        })
        .collect()
}

/// Sizes of the two-dataset polysemy corpus.
#[derive(Debug, Clone)]
pub struct PolysemySpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Surface forms that are type-A entities in dataset 1 and type-B
    /// entities in dataset 2.
    pub shared: usize,
}

impl Default for PolysemySpec {
    fn default() -> Self {
        Self {
            train: 200,
            dev: 60,
            test: 100,
            shared: 20,
        }
    }
}

/// Two single-type datasets plus, for dataset 1's test split, the spans of
/// type-B mentions (entities of the other type).
#[derive(Debug, Clone)]
pub struct PolysemyCorpus {
    pub datasets: Vec<DatasetBundle>,
    pub other_type_test: Vec<Vec<Span>>,
}

struct Lexicon {
    a_only: Vec<String>,
    b_only: Vec<String>,
    shared: Vec<String>,
    cue_a: Vec<String>,
    /// B-context cues seen by both datasets.
    cue_b_common: Vec<String>,
    /// B-context cues seen only in dataset 2 training data and in dataset
    /// 1's test split.
    cue_b_hidden: Vec<String>,
    filler: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mention {
    /// Type-A context and entity.
    A,
    /// Type-B context with cues from the common set.
    BCommon,
    /// Type-B context with cues from the hidden set.
    BHidden,
}

impl Lexicon {
    fn new(shared: usize) -> Self {
        Self {
            a_only: words("dis", 10),
            b_only: words("gen", 10),
            shared: words("amb", shared),
            cue_a: words("sym", 6),
            cue_b_common: words("exp", 6),
            cue_b_hidden: words("bind", 6),
            filler: words("f", 20),
        }
    }

    /// One sentence with two mentions. `label_a` selects which type is
    /// annotated. Returns the sentence and the spans of type-B mentions.
    fn sentence(&self, r: &mut ChaCha8Rng, kinds: [Mention; 2], label_a: bool, dataset: &str) -> (LabeledSentence, Vec<Span>) {
        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        let mut b_spans = Vec::new();
        let filler = |r: &mut ChaCha8Rng, tokens: &mut Vec<String>, tags: &mut Vec<Tag>, k: usize| {
            for _ in 0..k {
                tokens.push(self.filler.choose(r).unwrap().clone());
                tags.push(Tag::O);
            }
        };
        let lead = r.gen_range(0..=2);
        filler(r, &mut tokens, &mut tags, lead);
        for kind in kinds {
            let (cues, own) = match kind {
                Mention::A => (&self.cue_a, &self.a_only),
                Mention::BCommon => (&self.cue_b_common, &self.b_only),
                Mention::BHidden => (&self.cue_b_hidden, &self.b_only),
            };
            tokens.push(cues.choose(r).unwrap().clone());
            tags.push(Tag::O);
            let word = if r.gen_bool(0.5) { self.shared.choose(r) } else { own.choose(r) };
            let start = tokens.len();
            tokens.push(word.unwrap().clone());
            let annotated = (kind == Mention::A) == label_a;
            tags.push(if annotated { Tag::S } else { Tag::O });
            if kind != Mention::A {
                b_spans.push(Span::new(start, start));
            }
            let gap = r.gen_range(1..=2);
            filler(r, &mut tokens, &mut tags, gap);
        }
        debug_assert!(bioes_to_spans(&tags).is_ok());
        (LabeledSentence::new(tokens, tags, dataset).expect("nonempty"), b_spans)
    }
}

/// Generates the polysemy corpus.
///
/// Dataset 1 annotates type A and dataset 2 type B. Both contain mentions of
/// both types in their characteristic contexts. In dataset 1's test split
/// every type-B mention uses cue words that only dataset 2's training data
/// contains, so a model trained on dataset 1 alone can only resolve shared
/// surface forms there through a dataset-2 collaborator.
pub fn polysemy_corpus(seed: u64, spec: &PolysemySpec) -> PolysemyCorpus {
    let lex = Lexicon::new(spec.shared);
    let mut r = rng::stream(seed, "synthetic.polysemy", &[]);
    let pick_kinds = |r: &mut ChaCha8Rng, b: Mention| -> [Mention; 2] {
        let first = if r.gen_bool(0.5) { Mention::A } else { b };
        let second = if r.gen_bool(0.5) { Mention::A } else { b };
        [first, second]
    };
    let gen = |r: &mut ChaCha8Rng, n: usize, label_a: bool, name: &str, hidden: bool, common: bool| {
        let mut sentences = Vec::with_capacity(n);
        let mut spans = Vec::with_capacity(n);
        for _ in 0..n {
            let b = match (hidden, common) {
                (true, true) => {
                    if r.gen_bool(0.5) {
                        Mention::BHidden
                    } else {
                        Mention::BCommon
                    }
                }
                (true, false) => Mention::BHidden,
                _ => Mention::BCommon,
            };
            let kinds = pick_kinds(r, b);
            let (s, sp) = lex.sentence(r, kinds, label_a, name);
            sentences.push(s);
            spans.push(sp);
        }
        (sentences, spans)
    };
    let (train1, _) = gen(&mut r, spec.train, true, "d1", false, true);
    let (dev1, _) = gen(&mut r, spec.dev, true, "d1", false, true);
    let (test1, other1) = gen(&mut r, spec.test, true, "d1", true, false);
    let (train2, _) = gen(&mut r, spec.train, false, "d2", true, true);
    let (dev2, _) = gen(&mut r, spec.dev, false, "d2", true, true);
    let (test2, _) = gen(&mut r, spec.test, false, "d2", true, true);
    PolysemyCorpus {
        datasets: vec![
            DatasetBundle {
                name: "d1".into(),
                entity_type: EntityType::Disease,
                entity_suffix: Some("Disease".into()),
                train: train1,
                dev: dev1,
                test: test1,
            },
            DatasetBundle {
                name: "d2".into(),
                entity_type: EntityType::GeneProtein,
                entity_suffix: Some("Gene".into()),
                train: train2,
                dev: dev2,
                test: test2,
            },
        ],
        other_type_test: other1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn overfit_corpus_shape() {
        let c = overfit_corpus(1, 50);
        assert_eq!(c.len(), 50);
        let vocab: BTreeSet<_> = c.iter().flat_map(|s| s.tokens.iter()).collect();
        assert!(vocab.len() <= 40);
        assert!(c.iter().all(|s| bioes_to_spans(&s.tags).is_ok()));
        assert_eq!(overfit_corpus(1, 50), c);
    }

    #[test]
    fn hidden_cues_only_in_dataset_two_training_and_dataset_one_test() {
        let c = polysemy_corpus(3, &PolysemySpec::default());
        let lex = Lexicon::new(20);
        let has_hidden = |ss: &[LabeledSentence]| ss.iter().any(|s| s.tokens.iter().any(|t| lex.cue_b_hidden.contains(t)));
        assert!(!has_hidden(&c.datasets[0].train));
        assert!(!has_hidden(&c.datasets[0].dev));
        assert!(has_hidden(&c.datasets[0].test));
        assert!(has_hidden(&c.datasets[1].train));
        let shared_as_a = c.datasets[0].train.iter().any(|s| {
            s.tokens.iter().zip(&s.tags).any(|(t, g)| lex.shared.contains(t) && *g == Tag::S)
        });
        let shared_as_b = c.datasets[1].train.iter().any(|s| {
            s.tokens.iter().zip(&s.tags).any(|(t, g)| lex.shared.contains(t) && *g == Tag::S)
        });
        assert!(shared_as_a && shared_as_b);
        assert_eq!(c.other_type_test.len(), c.datasets[0].test.len());
        for (s, spans) in c.datasets[0].test.iter().zip(&c.other_type_test) {
            for sp in spans {
                assert_eq!(s.tags[sp.start], Tag::O);
            }
        }
    }
}
