//! Emission layer, token-level and sentence-level losses, and decoding.
//!
//! The transition matrix is 7×7 over `B I O E S START STOP`. A path
//! `y_1 … y_T` scores
//! `Σ_t (A[y_{t−1}, y_t] + z_t[y_t]) + A[y_T, STOP]` with `y_0 = START`, and
//! the sentence loss is `log Z − score(gold)`.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{logsumexp, Graph, NodeId, Tensor};
use crate::embedding::glorot;
use crate::encoder::EncodedSequence;
use crate::{Error, ParamSet, Result, Tag, NUM_TAGS};

pub const START: usize = 5;
pub const STOP: usize = 6;
pub const NUM_STATES: usize = 7;

pub const EMIT_W: &str = "emit.w";
pub const EMIT_B: &str = "emit.b";
pub const TRANSITIONS: &str = "crf.transitions";

/// Emission scores, one row of five per token.
pub type Emissions = Vec<[f64; NUM_TAGS]>;

pub fn init_params(d_enc: usize, params: &mut ParamSet, rng: &mut impl Rng) {
    params.insert(EMIT_W.into(), Arc::new(glorot(NUM_TAGS, d_enc, rng)));
    params.insert(EMIT_B.into(), Arc::new(Tensor::zeros(&[NUM_TAGS])));
    params.insert(TRANSITIONS.into(), Arc::new(Tensor::zeros(&[NUM_STATES, NUM_STATES])));
}

/// `z_t = W_y h_t + b_y` for every token.
pub fn emissions(enc: &EncodedSequence, w: &Tensor, b: &Tensor) -> Result<Emissions> {
    if w.shape() != [NUM_TAGS, enc.width()] || b.shape() != [NUM_TAGS] {
        return Err(Error::Invalid(format!(
            "emission parameters {:?}/{:?} do not fit encoder width {}",
            w.shape(),
            b.shape(),
            enc.width()
        )));
    }
    Ok((0..enc.len())
        .map(|t| {
            let h = enc.row(t);
            std::array::from_fn(|k| w.row(k).iter().zip(h).map(|(a, x)| a * x).sum::<f64>() + b.data()[k])
        })
        .collect())
}

/// `−Σ_t log softmax(z_t)[gold_t]`.
pub fn token_nll(z: &[[f64; NUM_TAGS]], gold: &[Tag]) -> f64 {
    z.iter()
        .zip(gold)
        .map(|(row, tag)| logsumexp(row) - row[tag.index()])
        .sum()
}

pub fn path_score(z: &[[f64; NUM_TAGS]], trans: &Tensor, path: &[Tag]) -> f64 {
    let mut prev = START;
    let mut score = 0.0;
    for (row, tag) in z.iter().zip(path) {
        score += trans.at(prev, tag.index()) + row[tag.index()];
        prev = tag.index();
    }
    score + trans.at(prev, STOP)
}

/// Forward algorithm in log space.
pub fn log_partition(z: &[[f64; NUM_TAGS]], trans: &Tensor) -> f64 {
    assert!(!z.is_empty(), "log_partition needs at least one token");
    let mut alpha: [f64; NUM_TAGS] = std::array::from_fn(|j| trans.at(START, j) + z[0][j]);
    for row in &z[1..] {
        alpha = std::array::from_fn(|j| {
            let terms: [f64; NUM_TAGS] = std::array::from_fn(|i| alpha[i] + trans.at(i, j));
            logsumexp(&terms) + row[j]
        });
    }
    let last: [f64; NUM_TAGS] = std::array::from_fn(|i| alpha[i] + trans.at(i, STOP));
    logsumexp(&last)
}

pub fn crf_nll(z: &[[f64; NUM_TAGS]], trans: &Tensor, gold: &[Tag]) -> f64 {
    log_partition(z, trans) - path_score(z, trans, gold)
}

/// `L_LSTM + L_CRF`.
pub fn total_loss(token_loss: f64, crf_loss: f64) -> f64 {
    token_loss + crf_loss
}

/// Whether BIOES allows `to` right after `from` (either may be START/STOP).
pub fn transition_allowed(from: usize, to: usize) -> bool {
    const B: usize = 0;
    const I: usize = 1;
    const E: usize = 3;
    if to == START || from == STOP {
        return false;
    }
    let inside_from = from == B || from == I;
    let continues = to == I || to == E;
    inside_from == continues
}

/// Copy of `trans` with structurally impossible BIOES transitions at −∞.
pub fn constrain(trans: &Tensor) -> Tensor {
    let mut out = trans.clone();
    for i in 0..NUM_STATES {
        for j in 0..NUM_STATES {
            if !transition_allowed(i, j) {
                out.set(i, j, f64::NEG_INFINITY);
            }
        }
    }
    out
}

/// Highest-scoring path and its score. Ties go to the lowest tag index at
/// every backtracking decision.
pub fn viterbi(z: &[[f64; NUM_TAGS]], trans: &Tensor) -> (Vec<Tag>, f64) {
    assert!(!z.is_empty(), "viterbi needs at least one token");
    let n = z.len();
    let mut delta: [f64; NUM_TAGS] = std::array::from_fn(|j| trans.at(START, j) + z[0][j]);
    let mut back = vec![[0usize; NUM_TAGS]; n];
    for t in 1..n {
        let mut next = [0.0; NUM_TAGS];
        for j in 0..NUM_TAGS {
            let (mut best_i, mut best) = (0, delta[0] + trans.at(0, j));
            for (i, d) in delta.iter().enumerate().skip(1) {
                let s = d + trans.at(i, j);
                if s > best {
                    best = s;
                    best_i = i;
                }
            }
            next[j] = best + z[t][j];
            back[t][j] = best_i;
        }
        delta = next;
    }
    let (mut last, mut best) = (0, delta[0] + trans.at(0, STOP));
    for (i, d) in delta.iter().enumerate().skip(1) {
        let s = d + trans.at(i, STOP);
        if s > best {
            best = s;
            last = i;
        }
    }
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    let tags = path.into_iter().map(|i| Tag::from_index(i).expect("tag index")).collect();
    (tags, best)
}

/// Emission nodes `W_y h_t + b_y` for each encoder node.
pub fn emission_nodes(g: &mut Graph, enc: &[NodeId]) -> Vec<NodeId> {
    let w = g.input(EMIT_W);
    let b = g.input(EMIT_B);
    enc.iter()
        .map(|&h| {
            let a = g.matmul(w, h);
            g.add(a, b)
        })
        .collect()
}

/// Token cross-entropy `Σ_t (logsumexp(z_t) − z_t[gold_t])` as a `[1]` node.
pub fn token_nll_node(g: &mut Graph, z: &[NodeId], gold: &[Tag]) -> NodeId {
    let mut total = None;
    for (&zt, tag) in z.iter().zip(gold) {
        let lse = g.log_sum_exp(zt, 0);
        let gold_score = g.pick(zt, tag.index());
        let term = g.sub(lse, gold_score);
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term),
        });
    }
    total.expect("nonempty sentence")
}

/// Sentence negative log-likelihood `log Z − score(gold)` as a `[1]` node.
pub fn crf_nll_node(g: &mut Graph, z: &[NodeId], gold: &[Tag]) -> NodeId {
    assert!(!z.is_empty() && z.len() == gold.len(), "gold path length");
    let trans = g.input(TRANSITIONS);
    let flat = g.reshape(trans, &[NUM_STATES * NUM_STATES]);
    let entry = |g: &mut Graph, i: usize, j: usize| g.pick(flat, i * NUM_STATES + j);

    let mut prev = START;
    let mut score = None;
    for (&zt, tag) in z.iter().zip(gold) {
        let a = entry(g, prev, tag.index());
        let e = g.pick(zt, tag.index());
        let term = g.add(a, e);
        score = Some(match score {
            None => term,
            Some(acc) => g.add(acc, term),
        });
        prev = tag.index();
    }
    let stop = entry(g, prev, STOP);
    let score = g.add(score.expect("nonempty"), stop);

    let tag_rows = g.slice(trans, 0, 0, NUM_TAGS);
    let inner = g.slice(tag_rows, 1, 0, NUM_TAGS);
    let start_row = {
        let r = g.slice(trans, 0, START, 1);
        let r = g.slice(r, 1, 0, NUM_TAGS);
        g.reshape(r, &[NUM_TAGS])
    };
    let stop_col = {
        let c = g.slice(tag_rows, 1, STOP, 1);
        g.reshape(c, &[NUM_TAGS])
    };
    let ones = g.constant(Tensor::filled(&[1, NUM_TAGS], 1.0));
    let mut alpha = g.add(start_row, z[0]);
    for &zt in &z[1..] {
        let col = g.reshape(alpha, &[NUM_TAGS, 1]);
        // spread[i][j] = alpha[i]
        let spread = g.matmul(col, ones);
        let s = g.add(spread, inner);
        let reduced = g.log_sum_exp(s, 0);
        alpha = g.add(reduced, zt);
    }
    let last = g.add(alpha, stop_col);
    let log_z = g.log_sum_exp(last, 0);
    g.sub(log_z, score)
}
