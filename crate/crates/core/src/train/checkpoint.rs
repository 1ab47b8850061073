//! Binary checkpoints.
//!
//! Layout: magic `CNET`, `u32` format version, `u64` header length, a JSON
//! header listing every tensor (name, dtype, shape) plus schedule metadata,
//! then the tensors as little-endian `f64` in header order. All integers are
//! little-endian.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::SignalKind;
use super::optim::AdaGrad;
use crate::collab::{CollaboState, ModelDims, Stm};
use crate::embedding::{CharVocab, EmbeddingDims, WordVocab};
use crate::{Error, ParamSet, Result, Tensor};

const MAGIC: &[u8; 4] = b"CNET";
const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: Meta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    phase: usize,
    epochs: Vec<usize>,
    best_macro_f1_bits: Option<u64>,
    stale_phases: usize,
    config_fingerprint: String,
    words: Vec<String>,
    chars: Vec<char>,
    d_word: usize,
    d_char: usize,
    windows: Vec<usize>,
    filters: usize,
    d_lstm: usize,
    signal: String,
    models: Vec<ModelMeta>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    name: String,
    entity_suffix: Option<String>,
    n_collaborators: usize,
    freeze_words: bool,
    adagrad_epsilon: f64,
}

fn param_key(k: usize, name: &str) -> String {
    format!("model.{k}/{name}")
}

fn acc_key(k: usize, name: &str) -> String {
    format!("adagrad.{k}/{name}")
}

/// Serializes `state` to bytes.
pub fn write_checkpoint(state: &CollaboState) -> Result<Vec<u8>> {
    let first = state
        .models
        .first()
        .ok_or_else(|| Error::Checkpoint("cannot save an empty state".into()))?;
    let dims = &first.dims;
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (k, (m, opt)) in state.models.iter().zip(&state.optimizers).enumerate() {
        if m.dims != *dims || !Arc::ptr_eq(&m.words, &first.words) && m.words != first.words {
            return Err(Error::Checkpoint("models must share dimensions and vocabulary".into()));
        }
        tensors.extend(m.params.iter().map(|(n, t)| (param_key(k, n), &**t)));
        tensors.extend(opt.accumulators.iter().map(|(n, t)| (acc_key(k, n), t)));
    }
    let header = Header {
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: Meta {
            phase: state.phase,
            epochs: state.epochs.clone(),
            best_macro_f1_bits: state.best_macro_f1.map(f64::to_bits),
            stale_phases: state.stale_phases,
            config_fingerprint: state.config_fingerprint.clone(),
            words: first.words.words().to_vec(),
            chars: first.chars.chars().to_vec(),
            d_word: dims.embedding.d_word,
            d_char: dims.embedding.d_char,
            windows: dims.embedding.windows.clone(),
            filters: dims.embedding.filters,
            d_lstm: dims.d_lstm,
            signal: match dims.signal {
                SignalKind::Bidirectional => "bidirectional".into(),
                SignalKind::Forward => "forward".into(),
            },
            models: state
                .models
                .iter()
                .zip(&state.optimizers)
                .map(|(m, o)| ModelMeta {
                    name: m.name.clone(),
                    entity_suffix: m.entity_suffix.clone(),
                    n_collaborators: m.n_collaborators,
                    freeze_words: m.freeze_words,
                    adagrad_epsilon: o.epsilon,
                })
                .collect(),
        },
    };
    let head = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(PREAMBLE + head.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses bytes written by [`write_checkpoint`]. Any inconsistency is an
/// error; no partial state is returned.
pub fn read_checkpoint(bytes: &[u8]) -> Result<CollaboState> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let head_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let head_end = PREAMBLE
        .checked_add(head_len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| bad("header extends past end of file"))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..head_end]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut expected = 0usize;
    for t in &header.tensors {
        if t.dtype != "f64" {
            return Err(Error::Checkpoint(format!("tensor {} has unsupported dtype {}", t.name, t.dtype)));
        }
        if t.shape.is_empty() || t.shape.len() > 2 || t.shape.contains(&0) {
            return Err(Error::Checkpoint(format!("tensor {} has invalid shape {:?}", t.name, t.shape)));
        }
        expected = t
            .shape
            .iter()
            .try_fold(8usize, |acc, d| acc.checked_mul(*d))
            .and_then(|n| expected.checked_add(n))
            .ok_or_else(|| bad("tensor sizes overflow"))?;
    }
    if bytes.len() - head_end != expected {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes but the shape table needs {expected}",
            bytes.len() - head_end
        )));
    }

    let meta = header.meta;
    let n = meta.models.len();
    if n == 0 || meta.epochs.len() != n {
        return Err(bad("model table is inconsistent"));
    }
    let mut params: Vec<ParamSet> = vec![ParamSet::new(); n];
    let mut accs: Vec<BTreeMap<String, Tensor>> = vec![BTreeMap::new(); n];
    let mut pos = head_end;
    for t in &header.tensors {
        let len: usize = t.shape.iter().product();
        let data = bytes[pos..pos + len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += len * 8;
        let tensor = Tensor::new(t.shape.clone(), data)?;
        let (kind, rest) = t
            .name
            .split_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("bad tensor name {}", t.name)))?;
        let (k, name) = rest
            .split_once('/')
            .and_then(|(k, name)| Some((k.parse::<usize>().ok()?, name)))
            .filter(|(k, _)| *k < n)
            .ok_or_else(|| Error::Checkpoint(format!("bad tensor name {}", t.name)))?;
        match kind {
            "model" => {
                params[k].insert(name.to_string(), Arc::new(tensor));
            }
            "adagrad" => {
                accs[k].insert(name.to_string(), tensor);
            }
            _ => return Err(Error::Checkpoint(format!("bad tensor name {}", t.name))),
        }
    }

    let signal = meta.signal.parse::<SignalKind>()?;
    let dims = ModelDims {
        embedding: EmbeddingDims {
            d_word: meta.d_word,
            d_char: meta.d_char,
            windows: meta.windows,
            filters: meta.filters,
        },
        d_lstm: meta.d_lstm,
        signal,
    };
    dims.embedding.validate()?;
    let words = Arc::new(WordVocab::new(&meta.words));
    if words.len() != meta.words.len() + 1 {
        return Err(bad("duplicate words in vocabulary"));
    }
    let chars = Arc::new(CharVocab::from_chars(meta.chars.iter().copied()));
    let mut models = Vec::with_capacity(n);
    let mut optimizers = Vec::with_capacity(n);
    for ((mm, p), a) in meta.models.into_iter().zip(params).zip(accs) {
        let table = p
            .get(crate::embedding::WORD_EMB)
            .ok_or_else(|| Error::Checkpoint(format!("model {} has no word table", mm.name)))?;
        if table.shape() != [words.len(), dims.embedding.d_word] {
            return Err(Error::Checkpoint(format!("model {} word table does not match the vocabulary", mm.name)));
        }
        for (name, acc) in &a {
            if p.get(name).map(|t| t.shape()) != Some(acc.shape()) {
                return Err(Error::Checkpoint(format!("accumulator {name} does not match a parameter")));
            }
        }
        models.push(Stm {
            name: mm.name,
            entity_suffix: mm.entity_suffix,
            dims: dims.clone(),
            words: Arc::clone(&words),
            chars: Arc::clone(&chars),
            params: p,
            n_collaborators: mm.n_collaborators,
            freeze_words: mm.freeze_words,
        });
        optimizers.push(AdaGrad {
            epsilon: mm.adagrad_epsilon,
            accumulators: a,
        });
    }
    Ok(CollaboState {
        models,
        optimizers,
        epochs: meta.epochs,
        phase: meta.phase,
        best_macro_f1: meta.best_macro_f1_bits.map(f64::from_bits),
        stale_phases: meta.stale_phases,
        config_fingerprint: meta.config_fingerprint,
    })
}

/// Writes through a temporary file in the same directory, then renames.
pub fn save_checkpoint(state: &CollaboState, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CollaboState> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_checkpoint(&bytes)
}

/// Bitwise equality of every tensor and schedule field.
pub fn states_identical(a: &CollaboState, b: &CollaboState) -> bool {
    let same_params = |x: &ParamSet, y: &ParamSet| {
        x.len() == y.len()
            && x.iter().zip(y).all(|((n1, t1), (n2, t2))| n1 == n2 && bits_equal(t1, t2))
    };
    a.models.len() == b.models.len()
        && a.models.iter().zip(&b.models).all(|(m, n)| {
            m.name == n.name
                && m.entity_suffix == n.entity_suffix
                && m.dims == n.dims
                && m.words == n.words
                && m.chars == n.chars
                && m.n_collaborators == n.n_collaborators
                && m.freeze_words == n.freeze_words
                && same_params(&m.params, &n.params)
        })
        && a.optimizers.iter().zip(&b.optimizers).all(|(o, p)| {
            o.epsilon.to_bits() == p.epsilon.to_bits()
                && o.accumulators.len() == p.accumulators.len()
                && o.accumulators
                    .iter()
                    .zip(&p.accumulators)
                    .all(|((n1, t1), (n2, t2))| n1 == n2 && bits_equal(t1, t2))
        })
        && a.epochs == b.epochs
        && a.phase == b.phase
        && a.best_macro_f1.map(f64::to_bits) == b.best_macro_f1.map(f64::to_bits)
        && a.stale_phases == b.stale_phases
        && a.config_fingerprint == b.config_fingerprint
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}
