//! CoNLL-style corpora: reading, normalized writing, tag-scheme conversion,
//! dev splitting and batching.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, Span, Tag};

/// Default cap on sentence length.
pub const DEFAULT_MAX_SENTENCE_LEN: usize = 512;

/// Token used at padded batch positions.
pub const PAD_TOKEN: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
    pub dataset: String,
}

impl LabeledSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<Tag>, dataset: impl Into<String>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != tags.len() {
            return Err(Error::Invalid(format!(
                "sentence needs matching nonempty tokens and tags ({} vs {})",
                tokens.len(),
                tags.len()
            )));
        }
        Ok(Self {
            tokens,
            tags,
            dataset: dataset.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A parsed file: sentences plus the entity-type suffix its tags carried.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<LabeledSentence>,
    pub entity_suffix: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityType {
    Disease,
    Chemical,
    GeneProtein,
    Other,
}

impl std::str::FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disease" => Ok(EntityType::Disease),
            "chemical" => Ok(EntityType::Chemical),
            "gene-protein" => Ok(EntityType::GeneProtein),
            "other" => Ok(EntityType::Other),
            _ => Err(Error::Config(format!("unknown entity type {s:?}"))),
        }
    }
}

impl std::fmt::Display for EntityType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EntityType::Disease => "disease",
            EntityType::Chemical => "chemical",
            EntityType::GeneProtein => "gene-protein",
            EntityType::Other => "other",
        })
    }
}

/// Train/dev/test splits of one single-type dataset.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub name: String,
    pub entity_type: EntityType,
    /// Tag suffix used when writing predictions (`Disease` in `B-Disease`).
    pub entity_suffix: Option<String>,
    pub train: Vec<LabeledSentence>,
    pub dev: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
}

impl DatasetBundle {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Invalid(format!("dataset {}: empty training split", self.name)));
        }
        if self.dev.is_empty() {
            return Err(Error::Invalid(format!("dataset {}: empty dev split", self.name)));
        }
        Ok(())
    }
}

/// Splits a tag string into its BIOES prefix and optional type suffix.
pub fn parse_tag(s: &str) -> Option<(Tag, Option<&str>)> {
    match s.split_once('-') {
        Some((p, suffix)) if !suffix.is_empty() => {
            let tag = Tag::from_prefix(p)?;
            (tag != Tag::O).then_some((tag, Some(suffix)))
        }
        Some(_) => None,
        None => Tag::from_prefix(s).map(|t| (t, None)),
    }
}

#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub dataset: String,
    pub max_sentence_len: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            dataset: String::new(),
            max_sentence_len: DEFAULT_MAX_SENTENCE_LEN,
        }
    }
}

/// Reads `token<TAB>tag` lines; blank lines end sentences.
///
/// All typed tags in one file must carry the same suffix, which is stripped.
pub fn parse_conll(reader: impl BufRead, source_name: &str, opts: &ParseOptions) -> Result<Corpus> {
    let err = |line: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut corpus = Corpus {
        sentences: Vec::new(),
        entity_suffix: None,
    };
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut start_line = 1;
    let flush = |tokens: &mut Vec<String>, tags: &mut Vec<Tag>, start_line: usize, corpus: &mut Corpus| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        if tokens.len() > opts.max_sentence_len {
            return Err(err(
                start_line,
                format!("sentence of {} tokens exceeds the cap of {}", tokens.len(), opts.max_sentence_len),
            ));
        }
        corpus.sentences.push(LabeledSentence::new(
            std::mem::take(tokens),
            std::mem::take(tags),
            opts.dataset.clone(),
        )?);
        Ok(())
    };

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, start_line, &mut corpus)?;
            continue;
        }
        if tokens.is_empty() {
            start_line = line_no;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields[0].is_empty() {
            return Err(err(line_no, format!("expected \"token<TAB>tag\", found {} field(s)", fields.len())));
        }
        let (tag, suffix) = parse_tag(fields[1]).ok_or_else(|| err(line_no, format!("unknown tag {:?}", fields[1])))?;
        if let Some(s) = suffix {
            match &corpus.entity_suffix {
                None => corpus.entity_suffix = Some(s.to_string()),
                Some(prev) if prev != s => {
                    return Err(err(line_no, format!("entity type {s:?} differs from {prev:?} seen earlier")));
                }
                Some(_) => {}
            }
        }
        tokens.push(fields[0].to_string());
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags, start_line, &mut corpus)?;
    Ok(corpus)
}

/// Normalized CoNLL text: tab delimiter, one blank line after each sentence.
pub fn write_conll(sentences: &[LabeledSentence], suffix: Option<&str>) -> String {
    let mut out = String::new();
    for s in sentences {
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            let _ = writeln!(out, "{tok}\t{}", tag.render(suffix));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BioMode {
    /// `I` after `O` or at sentence start is an error.
    #[default]
    Strict,
    /// Such an `I` is read as `B`.
    Lenient,
}

/// Rewrites a BIO sequence in BIOES.
pub fn bio_to_bioes(tags: &[Tag], mode: BioMode) -> Result<Vec<Tag>> {
    let mut fixed = Vec::with_capacity(tags.len());
    let mut prev = Tag::O;
    for (i, &t) in tags.iter().enumerate() {
        let t = match t {
            Tag::E | Tag::S => return Err(Error::InvalidTags(format!("{t} at position {i} is not a BIO tag"))),
            Tag::I if prev == Tag::O => match mode {
                BioMode::Strict => return Err(Error::InvalidTags(format!("I at position {i} does not continue an entity"))),
                BioMode::Lenient => Tag::B,
            },
            t => t,
        };
        fixed.push(t);
        prev = t;
    }
    let mut out = Vec::with_capacity(fixed.len());
    for (i, &t) in fixed.iter().enumerate() {
        let continues = fixed.get(i + 1) == Some(&Tag::I);
        out.push(match (t, continues) {
            (Tag::B, false) => Tag::S,
            (Tag::I, false) => Tag::E,
            (t, _) => t,
        });
    }
    Ok(out)
}

/// Rewrites a valid BIOES sequence in BIO.
pub fn bioes_to_bio(tags: &[Tag]) -> Result<Vec<Tag>> {
    bioes_to_spans(tags)?;
    Ok(tags
        .iter()
        .map(|t| match t {
            Tag::S => Tag::B,
            Tag::E => Tag::I,
            t => *t,
        })
        .collect())
}

/// Spans of a BIO sequence read directly (a `B` opens, `I` extends).
pub fn bio_spans(tags: &[Tag]) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            Tag::B => {
                if let Some(s) = open.take() {
                    spans.push(Span::new(s, i - 1));
                }
                open = Some(i);
            }
            Tag::I if open.is_some() => {}
            Tag::O => {
                if let Some(s) = open.take() {
                    spans.push(Span::new(s, i - 1));
                }
            }
            t => return Err(Error::InvalidTags(format!("{t} at position {i} in a BIO sequence"))),
        }
    }
    if let Some(s) = open {
        spans.push(Span::new(s, tags.len() - 1));
    }
    Ok(spans)
}

/// Entity spans of a valid BIOES sequence.
pub fn bioes_to_spans(tags: &[Tag]) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &t) in tags.iter().enumerate() {
        match (t, open) {
            (Tag::O, None) => {}
            (Tag::S, None) => spans.push(Span::new(i, i)),
            (Tag::B, None) => open = Some(i),
            (Tag::I, Some(_)) => {}
            (Tag::E, Some(s)) => {
                spans.push(Span::new(s, i));
                open = None;
            }
            _ => return Err(Error::InvalidTags(format!("unexpected {t} at position {i}"))),
        }
    }
    if open.is_some() {
        return Err(Error::InvalidTags("entity left open at end of sentence".into()));
    }
    Ok(spans)
}

/// Moves the last `dev_size` sentences of `train` into a dev split.
pub fn split_dev(mut train: Vec<LabeledSentence>, dev_size: usize) -> Result<(Vec<LabeledSentence>, Vec<LabeledSentence>)> {
    if dev_size == 0 {
        return Err(Error::Invalid("dev split must be nonempty".into()));
    }
    if dev_size >= train.len() {
        return Err(Error::Invalid(format!(
            "dev size {dev_size} must be smaller than the {} training sentences",
            train.len()
        )));
    }
    let dev = train.split_off(train.len() - dev_size);
    Ok((train, dev))
}

/// A group of sentences padded to a common length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Positions of the member sentences in the input slice.
    pub indices: Vec<usize>,
    /// Per row, tokens padded with [`PAD_TOKEN`].
    pub tokens: Vec<Vec<String>>,
    /// Per row, `true` at real tokens.
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn width(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Shuffles sentence order with `seed` and cuts it into batches of at most
/// `batch_size`, each padded to its longest member.
pub fn make_batches(sentences: &[LabeledSentence], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let width = chunk.iter().map(|&i| sentences[i].len()).max().unwrap_or(0);
            let mut tokens = Vec::with_capacity(chunk.len());
            let mut mask = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &sentences[i];
                let mut row = s.tokens.clone();
                row.resize(width, PAD_TOKEN.to_string());
                tokens.push(row);
                mask.push((0..width).map(|t| t < s.len()).collect());
            }
            Batch {
                indices: chunk.to_vec(),
                tokens,
                mask,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Tag::*;

    fn parse(s: &str) -> Result<Corpus> {
        parse_conll(s.as_bytes(), "mem", &ParseOptions::default())
    }

    #[test]
    fn parses_one_sentence() {
        let c = parse("IL-2\tB-protein\ngene\tE-protein\n\n").unwrap();
        assert_eq!(c.sentences.len(), 1);
        assert_eq!(c.sentences[0].tokens, vec!["IL-2", "gene"]);
        assert_eq!(c.sentences[0].tags, vec![B, E]);
        assert_eq!(c.entity_suffix.as_deref(), Some("protein"));
    }

    #[test]
    fn extra_blank_lines_do_not_create_sentences() {
        let c = parse("\n\na\tO\n\n\nb\tS-X\n\n\n").unwrap();
        assert_eq!(c.sentences.len(), 2);
    }

    #[test]
    fn wrong_field_count_reports_line() {
        match parse("a\tO\nfoo bar baz\n").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_tag_and_mixed_types_are_errors() {
        assert!(parse("a\tX-gene\n").is_err());
        assert!(parse("a\tU-gene\n").is_err());
        assert!(parse("a\tS-gene\nb\tS-disease\n").is_err());
    }

    #[test]
    fn long_sentences_are_rejected() {
        let opts = ParseOptions {
            max_sentence_len: 2,
            ..Default::default()
        };
        assert!(parse_conll("a\tO\nb\tO\nc\tO\n".as_bytes(), "mem", &opts).is_err());
    }

    #[test]
    fn bio_conversion_examples() {
        assert_eq!(bio_to_bioes(&[B, I, I, O], BioMode::Strict).unwrap(), vec![B, I, E, O]);
        assert_eq!(bio_to_bioes(&[B, O, B], BioMode::Strict).unwrap(), vec![S, O, S]);
        assert_eq!(bio_to_bioes(&[O, O], BioMode::Strict).unwrap(), vec![O, O]);
        assert!(bio_to_bioes(&[O, I], BioMode::Strict).is_err());
        assert!(bio_to_bioes(&[I], BioMode::Strict).is_err());
        assert_eq!(bio_to_bioes(&[O, I, I], BioMode::Lenient).unwrap(), vec![O, B, E]);
    }

    #[test]
    fn spans_of_bioes() {
        assert_eq!(bioes_to_spans(&[S, O, B, E]).unwrap(), vec![Span::new(0, 0), Span::new(2, 3)]);
        assert_eq!(bioes_to_spans(&[O, O, O]).unwrap(), vec![]);
        assert_eq!(bioes_to_spans(&[B, I, E]).unwrap(), vec![Span::new(0, 2)]);
        assert!(bioes_to_spans(&[B, O]).is_err());
        assert!(bioes_to_spans(&[I, E]).is_err());
    }

    fn sentences(n: usize) -> Vec<LabeledSentence> {
        (0..n)
            .map(|i| LabeledSentence::new(vec![format!("w{i}"); 1 + i % 4], vec![O; 1 + i % 4], "d").unwrap())
            .collect()
    }

    #[test]
    fn dev_split_takes_the_tail() {
        let (train, dev) = split_dev(sentences(10), 3).unwrap();
        assert_eq!(train, sentences(10)[..7].to_vec());
        assert_eq!(dev, sentences(10)[7..].to_vec());
        assert!(split_dev(sentences(10), 0).is_err());
        assert!(split_dev(sentences(10), 10).is_err());
    }

    #[test]
    fn batch_sizes_and_padding() {
        let s = sentences(25);
        let b = make_batches(&s, 10, 3).unwrap();
        assert_eq!(b.iter().map(Batch::len).collect::<Vec<_>>(), vec![10, 10, 5]);
        for batch in &b {
            for (row, (&i, mask)) in batch.indices.iter().zip(&batch.mask).enumerate() {
                assert_eq!(mask.iter().filter(|m| **m).count(), s[i].len());
                assert_eq!(&batch.tokens[row][..s[i].len()], s[i].tokens.as_slice());
            }
        }
        for batch in make_batches(&s, 1, 3).unwrap() {
            assert!(batch.mask[0].iter().all(|m| *m));
        }
        assert!(make_batches(&s, 0, 3).is_err());
        assert_eq!(make_batches(&s, 10, 3).unwrap(), b);
    }

    fn arb_bio() -> impl Strategy<Value = Vec<Tag>> {
        proptest::collection::vec(prop_oneof![Just(B), Just(I), Just(O)], 1..12).prop_map(|mut v| {
            // make I legal: I only after B or I
            for i in 0..v.len() {
                if v[i] == I && (i == 0 || v[i - 1] == O) {
                    v[i] = B;
                }
            }
            v
        })
    }

    proptest! {
        #[test]
        fn bio_roundtrip_preserves_spans(tags in arb_bio()) {
            let bioes = bio_to_bioes(&tags, BioMode::Strict).unwrap();
            prop_assert_eq!(bioes_to_spans(&bioes).unwrap(), bio_spans(&tags).unwrap());
            prop_assert_eq!(bioes_to_bio(&bioes).unwrap(), tags);
        }

        #[test]
        fn conll_roundtrip_is_byte_exact(
            sents in proptest::collection::vec(
                proptest::collection::vec(("[a-zA-Z0-9-]{1,6}", arb_bio()), 1..3), 1..4)
        ) {
            let mut all = Vec::new();
            for group in sents {
                for (tok, tags) in group {
                    let bioes = bio_to_bioes(&tags, BioMode::Strict).unwrap();
                    let tokens = vec![tok; bioes.len()];
                    all.push(LabeledSentence::new(tokens, bioes, "").unwrap());
                }
            }
            let text = write_conll(&all, Some("Gene"));
            let parsed = parse(&text).unwrap();
            prop_assert_eq!(write_conll(&parsed.sentences, parsed.entity_suffix.as_deref().or(Some("Gene"))), text);
            prop_assert_eq!(parsed.sentences, all);
        }

        #[test]
        fn batching_keeps_every_sentence(n in 1usize..40, size in 1usize..12, seed in 0u64..1000) {
            let s = sentences(n);
            let mut seen: Vec<usize> = make_batches(&s, size, seed).unwrap().into_iter().flat_map(|b| b.indices).collect();
            seen.sort();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
