//! Token representation: a word-embedding row concatenated with a
//! character-level word embedding (CLWE) produced by max-pooled character
//! convolutions, one filter bank per window size.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Bindings, Graph, NodeId, Tensor};
use crate::{Error, ParamSet, Result};

pub const WORD_EMB: &str = "word.emb";
/// Per-batch leaf holding only the word rows a graph touches.
pub const WORD_ROWS: &str = "word.rows";
pub const CHAR_EMB: &str = "char.emb";

/// Index of the padding character. Its embedding is a fixed zero vector.
pub const PAD_CHAR: usize = 0;
pub const UNK_CHAR: usize = 1;

/// Word vocabulary with a synthesized unknown-word row at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl WordVocab {
    /// Builds a vocabulary from words in first-seen order; duplicates are
    /// ignored.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            v.insert(w.as_ref());
        }
        v
    }

    fn insert(&mut self, word: &str) -> usize {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        let i = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), i);
        i
    }

    /// Number of rows including UNK.
    pub fn len(&self) -> usize {
        self.words.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn unk(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Exact match, then lowercase, then UNK.
    pub fn lookup(&self, word: &str) -> usize {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        let lower = word.to_lowercase();
        self.index.get(&lower).copied().unwrap_or(self.unk())
    }
}

/// Character vocabulary. Index 0 is PAD, 1 is UNK, known characters follow
/// in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<char> = words.into_iter().flat_map(|w| w.as_ref().chars().collect::<Vec<_>>()).collect();
        Self::from_chars(set)
    }

    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut v = Self {
            chars: Vec::new(),
            index: HashMap::new(),
        };
        for c in chars {
            if !v.index.contains_key(&c) {
                v.index.insert(c, v.chars.len() + 2);
                v.chars.push(c);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn lookup(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK_CHAR)
    }

    /// Character indices of a word. Empty words are an error; callers
    /// substitute a single unknown character.
    pub fn encode(&self, word: &str) -> Result<Vec<usize>> {
        if word.is_empty() {
            return Err(Error::Invalid("cannot embed an empty word".into()));
        }
        Ok(word.chars().map(|c| self.lookup(c)).collect())
    }
}

/// Pretrained word vectors.
#[derive(Debug, Clone)]
pub struct WordEmbeddingTable {
    pub vocab: WordVocab,
    /// `|V| × dim`, the last row is UNK.
    pub matrix: Tensor,
    pub trainable: bool,
}

impl WordEmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn lookup(&self, word: &str) -> &[f64] {
        self.matrix.row(self.vocab.lookup(word))
    }

    /// Random vectors for `vocab`, uniform in ±√(3/dim); the UNK row is zero.
    pub fn random(vocab: WordVocab, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        let rows = vocab.len();
        let mut data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let unk = vocab.unk();
        data[unk * dim..].iter_mut().for_each(|v| *v = 0.0);
        Self {
            vocab,
            matrix: Tensor::matrix(rows, dim, data),
            trainable: true,
        }
    }
}

/// Reads the plain-text format `"<count> <dim>"` followed by one
/// `word v1 … v_dim` line per word.
///
/// Duplicate words keep the last vector. A zero UNK row is appended.
pub fn load_word_embeddings(reader: impl BufRead, source_name: &str) -> Result<WordEmbeddingTable> {
    let parse_err = |line: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))??;
    let mut fields = header.split_whitespace();
    let (count, dim) = match (fields.next(), fields.next(), fields.next()) {
        (Some(c), Some(d), None) => (
            c.parse::<usize>().map_err(|e| parse_err(1, format!("bad count: {e}")))?,
            d.parse::<usize>().map_err(|e| parse_err(1, format!("bad dimension: {e}")))?,
        ),
        _ => return Err(parse_err(1, "header must be \"<count> <dim>\"".into())),
    };
    if dim == 0 {
        return Err(parse_err(1, "dimension must be positive".into()));
    }

    let mut vocab = WordVocab::new(Vec::<String>::new());
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ').filter(|p| !p.is_empty());
        let word = parts.next().expect("nonempty line has a first field");
        let values = parts
            .map(|p| p.parse::<f64>().map_err(|e| parse_err(line_no, format!("bad value {p:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(parse_err(line_no, format!("expected {dim} values, found {}", values.len())));
        }
        let before = vocab.words.len();
        let idx = vocab.insert(word);
        if idx < before {
            log::warn!("{source_name}:{line_no}: duplicate word {word:?}, keeping the later vector");
            rows[idx] = values;
        } else {
            rows.push(values);
        }
    }
    if rows.len() != count {
        log::warn!("{source_name}: header announces {count} words, file has {}", rows.len());
    }
    let n = rows.len() + 1;
    let mut data: Vec<f64> = rows.into_iter().flatten().collect();
    data.extend(std::iter::repeat_n(0.0, dim));
    Ok(WordEmbeddingTable {
        vocab,
        matrix: Tensor::matrix(n, dim, data),
        trainable: true,
    })
}

/// Shape of the character CNN and the word part of the token embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingDims {
    pub d_word: usize,
    pub d_char: usize,
    /// Window sizes, ascending and odd.
    pub windows: Vec<usize>,
    /// Output channels per window size.
    pub filters: usize,
}

impl EmbeddingDims {
    pub fn d_clwe(&self) -> usize {
        self.filters * self.windows.len()
    }

    pub fn output_width(&self) -> usize {
        self.d_word + self.d_clwe()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_word == 0 || self.d_char == 0 || self.filters == 0 || self.windows.is_empty() {
            return Err(Error::Config("embedding dimensions must be positive".into()));
        }
        if self.windows.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!("char windows must be odd, got {:?}", self.windows)));
        }
        if self.windows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("char windows must be strictly ascending, got {:?}", self.windows)));
        }
        Ok(())
    }

    fn max_pad(&self) -> usize {
        (self.windows.iter().max().copied().unwrap_or(1) - 1) / 2
    }
}

pub fn conv_weight_name(k: usize) -> String {
    format!("char.conv{k}.w")
}

pub fn conv_bias_name(k: usize) -> String {
    format!("char.conv{k}.b")
}

/// Glorot-uniform matrix.
pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Initializes character embeddings uniform(−0.5, 0.5)/d_char (PAD row
/// zero), Glorot filters and zero biases.
pub fn init_char_params(dims: &EmbeddingDims, n_chars: usize, params: &mut ParamSet, rng: &mut impl Rng) {
    let mut emb = Tensor::zeros(&[n_chars, dims.d_char]);
    for r in 0..n_chars {
        if r == PAD_CHAR {
            continue;
        }
        for v in emb.row_mut(r) {
            *v = rng.gen_range(-0.5..0.5) / dims.d_char as f64;
        }
    }
    params.insert(CHAR_EMB.into(), Arc::new(emb));
    for &k in &dims.windows {
        params.insert(conv_weight_name(k), Arc::new(glorot(dims.filters, k * dims.d_char, rng)));
        params.insert(conv_bias_name(k), Arc::new(Tensor::zeros(&[dims.filters])));
    }
}

/// Adds the CLWE of one word to `g`, returning a `[d_clwe]` node.
///
/// For window size k the word is padded with (k−1)/2 zero rows on each
/// side, giving exactly one window per character; every bank's responses
/// are max-pooled over windows and the banks are concatenated in ascending
/// window order.
pub fn char_cnn_node(g: &mut Graph, dims: &EmbeddingDims, char_ids: &[usize]) -> Result<NodeId> {
    if char_ids.is_empty() {
        return Err(Error::Invalid("cannot embed an empty word".into()));
    }
    let m = char_ids.len();
    let pad = dims.max_pad();
    let rows: Vec<Option<usize>> = std::iter::repeat_n(None, pad)
        .chain(char_ids.iter().map(|&c| if c == PAD_CHAR { None } else { Some(c) }))
        .chain(std::iter::repeat_n(None, pad))
        .collect();
    let table = g.input(CHAR_EMB);
    let padded = g.gather(table, rows);
    let mut banks = Vec::with_capacity(dims.windows.len());
    for &k in &dims.windows {
        let offset = pad - (k - 1) / 2;
        let cols: Vec<NodeId> = (0..m)
            .map(|i| {
                let w = g.slice(padded, 0, offset + i, k);
                g.reshape(w, &[k * dims.d_char, 1])
            })
            .collect();
        let windows = g.concat(&cols, 1);
        let weight = g.input(&conv_weight_name(k));
        let response = g.matmul(weight, windows);
        // max_i [W C_i + b]_j == max_i [W C_i]_j + b_j, bias added after pooling
        let pooled = g.max_axis(response, 1);
        let bias = g.input(&conv_bias_name(k));
        banks.push(g.add(pooled, bias));
    }
    Ok(if banks.len() == 1 { banks[0] } else { g.concat(&banks, 0) })
}

/// Window vectors `C_i` of a word for window size `k`: one per character,
/// each the concatenation of k character embeddings centred on it.
pub fn char_windows(params: &ParamSet, chars: &CharVocab, word: &str, k: usize) -> Result<Vec<Vec<f64>>> {
    if k % 2 == 0 {
        return Err(Error::Invalid(format!("window size must be odd, got {k}")));
    }
    let ids = chars.encode(word)?;
    let emb = param(params, CHAR_EMB)?;
    let d = emb.cols();
    let half = (k - 1) / 2;
    let row = |pos: isize| -> Vec<f64> {
        if pos < 0 || pos as usize >= ids.len() || ids[pos as usize] == PAD_CHAR {
            vec![0.0; d]
        } else {
            emb.row(ids[pos as usize]).to_vec()
        }
    };
    Ok((0..ids.len() as isize)
        .map(|i| (i - half as isize..=i + half as isize).flat_map(row).collect())
        .collect())
}

/// CLWE of a single word, evaluated outside any training graph.
pub fn char_cnn(params: &ParamSet, dims: &EmbeddingDims, chars: &CharVocab, word: &str) -> Result<Vec<f64>> {
    let ids = chars.encode(word)?;
    let mut g = Graph::new();
    let out = char_cnn_node(&mut g, dims, &ids)?;
    Ok(g.evaluate(out, params)?.into_data())
}

/// Full token input `[x_t, x_t^c]`: word vector first, CLWE second.
pub fn embed_token(
    params: &ParamSet,
    dims: &EmbeddingDims,
    words: &WordVocab,
    chars: &CharVocab,
    word: &str,
) -> Result<Vec<f64>> {
    let table = param(params, WORD_EMB)?;
    let mut out = table.row(words.lookup(word)).to_vec();
    out.extend(char_cnn(params, dims, chars, word)?);
    Ok(out)
}

pub(crate) fn param<'a>(params: &'a Bindings, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .map(|t| &**t)
        .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
}
