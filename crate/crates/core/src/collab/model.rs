use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::crf::{self, Emissions, TRANSITIONS};
use crate::embedding::{char_cnn_node, init_char_params, param, CharVocab, EmbeddingDims, WordVocab, WORD_EMB, WORD_ROWS};
use crate::encoder::{BiLstm, EncodedSequence};
use crate::train::config::{RunConfig, SignalKind};
use crate::train::dropout::dropout_mask;
use crate::train::optim::AdaGrad;
use crate::{Bindings, Error, Gradients, ParamSet, Result, Tag};

/// Collaborator weights of one target model, one per collaborator.
pub const ALPHA: &str = "collab.alpha";

/// Aggregated collaborator signal, one row per token.
pub type AggregatedSignal = EncodedSequence;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub embedding: EmbeddingDims,
    pub d_lstm: usize,
    pub signal: SignalKind,
}

impl ModelDims {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            embedding: cfg.embedding_dims(),
            d_lstm: cfg.d_lstm,
            signal: cfg.signal,
        }
    }

    /// Width of the collaborator slot, equal to the shared signal width.
    pub fn slot_width(&self) -> usize {
        match self.signal {
            SignalKind::Bidirectional => 2 * self.d_lstm,
            SignalKind::Forward => self.d_lstm,
        }
    }

    pub fn input_width(&self) -> usize {
        self.embedding.output_width() + self.slot_width()
    }

    pub fn hidden_width(&self) -> usize {
        2 * self.d_lstm
    }
}

/// Content of the collaborator slot for one sentence.
#[derive(Debug, Clone, Copy)]
pub enum Slot<'a> {
    Zero,
    /// A precomputed signal, treated as a constant.
    Fixed(&'a AggregatedSignal),
    /// Collaborator signals pooled with this model's trainable α.
    Collaborators(&'a [EncodedSequence]),
}

/// Inverted-dropout masks for the real tokens of one row. Empty vectors
/// disable the corresponding dropout.
#[derive(Debug, Clone, Default)]
pub struct RowDropout {
    pub clwe: Vec<Tensor>,
    pub hidden: Vec<Tensor>,
}

impl RowDropout {
    pub fn sample(rng: &mut impl Rng, n_tokens: usize, dims: &ModelDims, rate_clwe: f64, rate_hidden: f64) -> Self {
        let mut masks = |width: usize, rate: f64| -> Vec<Tensor> {
            if rate == 0.0 {
                Vec::new()
            } else {
                (0..n_tokens).map(|_| dropout_mask(width, rate, rng)).collect()
            }
        };
        let clwe = masks(dims.embedding.d_clwe(), rate_clwe);
        let hidden = masks(dims.hidden_width(), rate_hidden);
        Self { clwe, hidden }
    }
}

/// One sentence of a batch. `tokens` may be padded; `mask` then marks the
/// real prefix, and `gold` and slot signals cover only real tokens.
#[derive(Debug, Clone, Copy)]
pub struct RowInput<'a> {
    pub tokens: &'a [String],
    pub mask: Option<&'a [bool]>,
    pub gold: Option<&'a [Tag]>,
    pub slot: Slot<'a>,
    pub dropout: Option<&'a RowDropout>,
}

impl<'a> RowInput<'a> {
    pub fn eval(tokens: &'a [String], slot: Slot<'a>) -> Self {
        Self {
            tokens,
            mask: None,
            gold: None,
            slot,
            dropout: None,
        }
    }

    fn real_len(&self) -> Result<usize> {
        let Some(mask) = self.mask else {
            return Ok(self.tokens.len());
        };
        if mask.len() != self.tokens.len() {
            return Err(Error::Invalid("mask and token row differ in length".into()));
        }
        let n = mask.iter().take_while(|m| **m).count();
        if mask[n..].iter().any(|m| *m) {
            return Err(Error::Invalid("real tokens must form a prefix of the row".into()));
        }
        Ok(n)
    }
}

/// A built batch graph plus the nodes callers read back.
#[derive(Debug)]
pub struct Forward {
    pub graph: Graph,
    /// Summed batch loss when every row had gold tags.
    pub loss: Option<NodeId>,
    /// Per row, emission nodes of the real tokens.
    pub emissions: Vec<Vec<NodeId>>,
    /// Per row, the signal this model shares as a collaborator.
    pub signals: Vec<Vec<NodeId>>,
    /// Global word-table rows backing the local `word.rows` leaf.
    pub word_rows: Vec<usize>,
    last: NodeId,
}

/// Single-task BiLSTM-CRF with a collaborator slot in its input.
#[derive(Debug, Clone)]
pub struct Stm {
    pub name: String,
    pub entity_suffix: Option<String>,
    pub dims: ModelDims,
    pub words: Arc<WordVocab>,
    pub chars: Arc<CharVocab>,
    pub params: ParamSet,
    pub n_collaborators: usize,
    pub freeze_words: bool,
}

impl Stm {
    /// Fresh model: char CNN, BiLSTM and CRF drawn from `rng`, α all ones.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        dims: ModelDims,
        words: Arc<WordVocab>,
        chars: Arc<CharVocab>,
        word_matrix: Arc<Tensor>,
        n_collaborators: usize,
        freeze_words: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        dims.embedding.validate()?;
        if word_matrix.shape() != [words.len(), dims.embedding.d_word] {
            return Err(Error::Invalid(format!(
                "word matrix {:?} does not fit {} words of width {}",
                word_matrix.shape(),
                words.len(),
                dims.embedding.d_word
            )));
        }
        let mut params = ParamSet::new();
        params.insert(WORD_EMB.into(), word_matrix);
        init_char_params(&dims.embedding, chars.len(), &mut params, rng);
        BiLstm::new(dims.input_width(), dims.d_lstm).init(&mut params, rng);
        crf::init_params(dims.hidden_width(), &mut params, rng);
        if n_collaborators > 0 {
            params.insert(ALPHA.into(), Arc::new(Tensor::filled(&[n_collaborators], 1.0)));
        }
        Ok(Self {
            name: name.into(),
            entity_suffix: None,
            dims,
            words,
            chars,
            params,
            n_collaborators,
            freeze_words,
        })
    }

    pub fn bilstm(&self) -> BiLstm {
        BiLstm::new(self.dims.input_width(), self.dims.d_lstm)
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.params.get(ALPHA).map(|a| a.data().to_vec()).unwrap_or_default()
    }

    /// Builds one graph over `rows`. The loss is the sum over rows of the
    /// CRF negative log-likelihood, plus token cross-entropy when
    /// `token_loss` is set.
    pub fn build(&self, rows: &[RowInput<'_>], token_loss: bool) -> Result<Forward> {
        if rows.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let dims = &self.dims;
        let d_word = dims.embedding.d_word;
        let mut g = Graph::new();
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut word_rows = Vec::new();
        let mut clwe_cache: HashMap<&str, NodeId> = HashMap::new();
        let table = g.input(WORD_ROWS);
        let zero_input = g.constant(Tensor::zeros(&[dims.input_width()]));
        let zero_slot = g.constant(Tensor::zeros(&[dims.slot_width()]));
        let bilstm = self.bilstm();
        let mut out = Forward {
            graph: Graph::new(),
            loss: None,
            emissions: Vec::with_capacity(rows.len()),
            signals: Vec::with_capacity(rows.len()),
            word_rows: Vec::new(),
            last: zero_slot,
        };
        let mut losses = Vec::new();
        let mut all_gold = true;

        for row in rows {
            let n = row.real_len()?;
            if n == 0 {
                return Err(Error::Invalid("cannot tag an empty sentence".into()));
            }
            let slot = self.slot_nodes(&mut g, row.slot, n, zero_slot)?;
            let ids: Vec<Option<usize>> = row.tokens[..n]
                .iter()
                .map(|w| {
                    let global = self.words.lookup(w);
                    let next = local.len();
                    let l = *local.entry(global).or_insert_with(|| {
                        word_rows.push(global);
                        next
                    });
                    Some(l)
                })
                .collect();
            let word_vecs = g.gather(table, ids);
            let mut inputs = Vec::with_capacity(row.tokens.len());
            for (t, word) in row.tokens.iter().enumerate() {
                if t >= n {
                    inputs.push(zero_input);
                    continue;
                }
                let wv = g.slice(word_vecs, 0, t, 1);
                let wv = g.reshape(wv, &[d_word]);
                let clwe = match clwe_cache.get(word.as_str()) {
                    Some(&c) => c,
                    None => {
                        let ids = self.chars.encode(word)?;
                        let c = char_cnn_node(&mut g, &dims.embedding, &ids)?;
                        clwe_cache.insert(word.as_str(), c);
                        c
                    }
                };
                let clwe = match row.dropout.and_then(|d| d.clwe.get(t)) {
                    Some(mask) => g.dropout(clwe, mask.clone()),
                    None => clwe,
                };
                inputs.push(g.concat(&[wv, clwe, slot[t]], 0));
            }
            let enc = bilstm.encode(&mut g, &inputs, row.mask)?;
            let shared = match dims.signal {
                SignalKind::Bidirectional => enc.joint[..n].to_vec(),
                SignalKind::Forward => enc.forward[..n].to_vec(),
            };
            let hidden: Vec<NodeId> = (0..n)
                .map(|t| match row.dropout.and_then(|d| d.hidden.get(t)) {
                    Some(mask) => g.dropout(enc.joint[t], mask.clone()),
                    None => enc.joint[t],
                })
                .collect();
            let z = crf::emission_nodes(&mut g, &hidden);
            match row.gold {
                Some(gold) => {
                    if gold.len() != n {
                        return Err(Error::Invalid(format!("{} gold tags for {n} tokens", gold.len())));
                    }
                    let mut l = crf::crf_nll_node(&mut g, &z, gold);
                    if token_loss {
                        let tl = crf::token_nll_node(&mut g, &z, gold);
                        l = g.add(tl, l);
                    }
                    losses.push(l);
                }
                None => all_gold = false,
            }
            out.emissions.push(z);
            out.signals.push(shared);
        }
        if all_gold {
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l);
            }
            out.loss = Some(total);
        }
        out.last = g.last().expect("nonempty graph");
        out.graph = g;
        out.word_rows = word_rows;
        Ok(out)
    }

    /// Per-token slot nodes of one row.
    fn slot_nodes(&self, g: &mut Graph, slot: Slot<'_>, n: usize, zero: NodeId) -> Result<Vec<NodeId>> {
        let w = self.dims.slot_width();
        match slot {
            Slot::Collaborators([]) | Slot::Zero => Ok(vec![zero; n]),
            Slot::Fixed(agg) => {
                check_signal(agg, n, w)?;
                let c = g.constant(agg.0.clone());
                Ok((0..n)
                    .map(|t| {
                        let r = g.slice(c, 0, t, 1);
                        g.reshape(r, &[w])
                    })
                    .collect())
            }
            Slot::Collaborators(signals) => {
                if signals.len() != self.n_collaborators {
                    return Err(Error::Invalid(format!(
                        "model {} expects {} collaborator signals, got {}",
                        self.name,
                        self.n_collaborators,
                        signals.len()
                    )));
                }
                let alpha = g.input(ALPHA);
                let mut scaled = Vec::with_capacity(signals.len());
                for (k, s) in signals.iter().enumerate() {
                    check_signal(s, n, w)?;
                    let flat = g.constant(s.0.clone().reshaped(&[n * w, 1])?);
                    let a = g.pick(alpha, k);
                    let a = g.reshape(a, &[1, 1]);
                    let prod = g.matmul(flat, a);
                    scaled.push(g.reshape(prod, &[1, n * w]));
                }
                let stacked = if scaled.len() == 1 { scaled[0] } else { g.concat(&scaled, 0) };
                let pooled = g.max_axis(stacked, 0);
                Ok((0..n).map(|t| g.slice(pooled, 0, t * w, w)).collect())
            }
        }
    }

    /// Parameters bound for a graph built by [`Stm::build`]: the full table
    /// is replaced by the rows the batch touches.
    pub fn bindings(&self, word_rows: &[usize]) -> Result<Bindings> {
        let table = param(&self.params, WORD_EMB)?;
        let d = table.cols();
        let mut data = Vec::with_capacity(word_rows.len() * d);
        for &r in word_rows {
            data.extend_from_slice(table.row(r));
        }
        let mut b: Bindings = self
            .params
            .iter()
            .filter(|(k, _)| k.as_str() != WORD_EMB)
            .map(|(k, v)| (k.clone(), Arc::clone(v)))
            .collect();
        b.insert(WORD_ROWS.into(), Arc::new(Tensor::matrix(word_rows.len(), d, data)));
        Ok(b)
    }

    /// Loss and gradients of a batch. Gradients of `word.rows` are returned
    /// under that name; [`Stm::apply`] scatters them into the table.
    pub fn loss_and_grads(&self, rows: &[RowInput<'_>], token_loss: bool) -> Result<(f64, Gradients, Vec<usize>)> {
        let mut fwd = self.build(rows, token_loss)?;
        let loss = fwd.loss.ok_or_else(|| Error::Invalid("training rows need gold tags".into()))?;
        let bindings = self.bindings(&fwd.word_rows)?;
        let value = fwd.graph.evaluate(loss, &bindings)?.item();
        let grads = fwd.graph.backward(loss)?;
        Ok((value, grads, fwd.word_rows))
    }

    /// One AdaGrad step with gradients from [`Stm::loss_and_grads`].
    pub fn apply(&mut self, grads: &Gradients, word_rows: &[usize], opt: &mut AdaGrad, lr: f64) -> Result<()> {
        for (name, grad) in grads {
            if name == WORD_ROWS {
                if self.freeze_words {
                    continue;
                }
                let rows: Vec<(usize, Vec<f64>)> = word_rows
                    .iter()
                    .enumerate()
                    .map(|(l, &r)| (r, grad.row(l).to_vec()))
                    .collect();
                opt.step_rows(&mut self.params, WORD_EMB, &rows, lr)?;
            } else {
                opt.step(&mut self.params, name, grad, lr)?;
            }
        }
        Ok(())
    }

    /// Eval-mode emissions and shared signal of one sentence.
    pub fn infer(&self, tokens: &[String], slot: Slot<'_>) -> Result<(Emissions, EncodedSequence)> {
        let mut fwd = self.build(&[RowInput::eval(tokens, slot)], false)?;
        let bindings = self.bindings(&fwd.word_rows)?;
        fwd.graph.evaluate(fwd.last, &bindings)?;
        let g = &fwd.graph;
        let z = fwd.emissions[0]
            .iter()
            .map(|&id| {
                let v = g.value(id).expect("evaluated").data();
                let mut row = [0.0; crate::NUM_TAGS];
                row.copy_from_slice(v);
                row
            })
            .collect();
        let signal = fwd.signals[0]
            .iter()
            .map(|&id| g.value(id).expect("evaluated").data().to_vec())
            .collect();
        Ok((z, EncodedSequence::from_rows(signal)?))
    }

    /// The signal this model contributes as a frozen collaborator: a
    /// zero-slot, dropout-free forward pass.
    pub fn collab_inference(&self, tokens: &[String]) -> Result<EncodedSequence> {
        Ok(self.infer(tokens, Slot::Zero)?.1)
    }

    pub fn emissions(&self, tokens: &[String], slot: Slot<'_>) -> Result<Emissions> {
        Ok(self.infer(tokens, slot)?.0)
    }

    /// Viterbi tags; `constrained` forbids transitions that break BIOES.
    pub fn predict(&self, tokens: &[String], slot: Slot<'_>, constrained: bool) -> Result<Vec<Tag>> {
        let z = self.emissions(tokens, slot)?;
        let trans = param(&self.params, TRANSITIONS)?;
        let (tags, _) = if constrained {
            crf::viterbi(&z, &crf::constrain(trans))
        } else {
            crf::viterbi(&z, trans)
        };
        Ok(tags)
    }

    /// Hex SHA-256 over every parameter name, shape and value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_signal(s: &EncodedSequence, n: usize, w: usize) -> Result<()> {
    if s.len() != n || s.width() != w {
        return Err(Error::Invalid(format!(
            "signal of {}x{} does not fit {n} tokens x {w}",
            s.len(),
            s.width()
        )));
    }
    Ok(())
}

/// Weighted max pooling: `Ŝ_t[j] = max_k α_k · s_k,t[j]`, ties to the lowest
/// collaborator index.
pub fn aggregate(signals: &[EncodedSequence], alphas: &[f64]) -> Result<AggregatedSignal> {
    let first = signals
        .first()
        .ok_or_else(|| Error::Invalid("aggregation needs at least one signal".into()))?;
    if signals.len() != alphas.len() {
        return Err(Error::Invalid(format!("{} signals but {} weights", signals.len(), alphas.len())));
    }
    let (n, w) = (first.len(), first.width());
    for s in signals {
        check_signal(s, n, w)?;
    }
    let mut out = Tensor::filled(&[n, w], f64::NEG_INFINITY);
    for (s, &a) in signals.iter().zip(alphas) {
        for (o, &v) in out.data_mut().iter_mut().zip(s.0.data()) {
            let x = a * v;
            if x > *o {
                *o = x;
            }
        }
    }
    // −0.0 to +0.0
    out.data_mut().iter_mut().for_each(|v| *v += 0.0);
    Ok(EncodedSequence(out))
}
