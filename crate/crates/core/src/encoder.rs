//! Bidirectional LSTM encoder.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::embedding::glorot;
use crate::{Error, ParamSet, Result};

const GATES: [&str; 4] = ["i", "f", "c", "o"];

/// One LSTM direction; parameters live in a [`ParamSet`] under `prefix`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lstm {
    pub prefix: String,
    pub d_in: usize,
    pub d_hidden: usize,
}

impl Lstm {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            d_in,
            d_hidden,
        }
    }

    pub fn input_weight(&self, gate: &str) -> String {
        format!("{}.w_x{gate}", self.prefix)
    }

    pub fn recurrent_weight(&self, gate: &str) -> String {
        format!("{}.w_h{gate}", self.prefix)
    }

    pub fn bias(&self, gate: &str) -> String {
        format!("{}.b_{gate}", self.prefix)
    }

    /// Glorot-uniform weights, zero biases except the forget gate at 1.
    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        for gate in GATES {
            params.insert(self.input_weight(gate), Arc::new(glorot(self.d_hidden, self.d_in, rng)));
            params.insert(self.recurrent_weight(gate), Arc::new(glorot(self.d_hidden, self.d_hidden, rng)));
            let b = if gate == "f" { 1.0 } else { 0.0 };
            params.insert(self.bias(gate), Arc::new(Tensor::filled(&[self.d_hidden], b)));
        }
    }

    fn gate_pre(&self, g: &mut Graph, gate: &str, x: NodeId, h_prev: NodeId) -> NodeId {
        let wx = g.input(&self.input_weight(gate));
        let wh = g.input(&self.recurrent_weight(gate));
        let b = g.input(&self.bias(gate));
        let a = g.matmul(wx, x);
        let r = g.matmul(wh, h_prev);
        let s = g.add(a, r);
        g.add(s, b)
    }

    /// One recurrence step:
    ///
    /// ```text
    /// i = σ(W_xi x + W_hi h + b_i)     f = σ(W_xf x + W_hf h + b_f)
    /// c = f ⊙ c_prev + i ⊙ tanh(W_xc x + W_hc h + b_c)
    /// o = σ(W_xo x + W_ho h + b_o)     h = o ⊙ tanh(c)
    /// ```
    pub fn step(&self, g: &mut Graph, x: NodeId, h_prev: NodeId, c_prev: NodeId) -> (NodeId, NodeId) {
        let pi = self.gate_pre(g, "i", x, h_prev);
        let i = g.sigmoid(pi);
        let pf = self.gate_pre(g, "f", x, h_prev);
        let f = g.sigmoid(pf);
        let pc = self.gate_pre(g, "c", x, h_prev);
        let cand = g.tanh(pc);
        let keep = g.mul(f, c_prev);
        let write = g.mul(i, cand);
        let c = g.add(keep, write);
        let po = self.gate_pre(g, "o", x, h_prev);
        let o = g.sigmoid(po);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        (h, c)
    }

    /// Runs the recurrence over `inputs` in the given order. Positions whose
    /// mask entry is false carry the previous state through unchanged.
    fn run(&self, g: &mut Graph, inputs: &[NodeId], mask: &[bool], order: impl Iterator<Item = usize>) -> Vec<NodeId> {
        let zero = g.constant(Tensor::zeros(&[self.d_hidden]));
        let (mut h, mut c) = (zero, zero);
        let mut out = vec![zero; inputs.len()];
        for t in order {
            if mask[t] {
                (h, c) = self.step(g, inputs[t], h, c);
            }
            out[t] = h;
        }
        out
    }
}

/// Forward and backward LSTMs over the same inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

/// Per-direction hidden states of every position.
#[derive(Debug, Clone)]
pub struct BiLstmNodes {
    pub forward: Vec<NodeId>,
    pub backward: Vec<NodeId>,
    /// `[h_f, h_b]` per position.
    pub joint: Vec<NodeId>,
}

impl BiLstm {
    pub fn new(d_in: usize, d_hidden: usize) -> Self {
        Self {
            forward: Lstm::new("lstm.fw", d_in, d_hidden),
            backward: Lstm::new("lstm.bw", d_in, d_hidden),
        }
    }

    pub fn d_in(&self) -> usize {
        self.forward.d_in
    }

    pub fn d_hidden(&self) -> usize {
        self.forward.d_hidden
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        self.forward.init(params, rng);
        self.backward.init(params, rng);
    }

    /// Encodes `inputs` (each `[d_in]`). `mask` marks real tokens; masked
    /// positions are skipped by both recurrences.
    pub fn encode(&self, g: &mut Graph, inputs: &[NodeId], mask: Option<&[bool]>) -> Result<BiLstmNodes> {
        if inputs.is_empty() {
            return Err(Error::Invalid("cannot encode an empty sequence".into()));
        }
        let all = vec![true; inputs.len()];
        let mask = mask.unwrap_or(&all);
        if mask.len() != inputs.len() {
            return Err(Error::Invalid(format!("mask length {} != sequence length {}", mask.len(), inputs.len())));
        }
        let forward = self.forward.run(g, inputs, mask, 0..inputs.len());
        let backward = self.backward.run(g, inputs, mask, (0..inputs.len()).rev());
        let joint = forward
            .iter()
            .zip(&backward)
            .map(|(&f, &b)| g.concat(&[f, b], 0))
            .collect();
        Ok(BiLstmNodes {
            forward,
            backward,
            joint,
        })
    }
}

/// Per-token encoder states, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence(pub Tensor);

impl EncodedSequence {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::Invalid("encoded sequence needs equal-width nonempty rows".into()));
        }
        let n = rows.len();
        Ok(Self(Tensor::matrix(n, width, rows.into_iter().flatten().collect())))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }
}

/// Single step on plain vectors.
pub fn lstm_step(params: &ParamSet, lstm: &Lstm, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let xn = g.constant(Tensor::vector(x.to_vec()));
    let hn = g.constant(Tensor::vector(h_prev.to_vec()));
    let cn = g.constant(Tensor::vector(c_prev.to_vec()));
    let (h, c) = lstm.step(&mut g, xn, hn, cn);
    let both = g.concat(&[h, c], 0);
    let v = g.evaluate(both, params)?.into_data();
    let (h, c) = v.split_at(lstm.d_hidden);
    Ok((h.to_vec(), c.to_vec()))
}

/// Encodes plain input vectors outside a training graph.
pub fn bilstm_encode(params: &ParamSet, bilstm: &BiLstm, inputs: &[Vec<f64>]) -> Result<EncodedSequence> {
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = inputs.iter().map(|x| g.constant(Tensor::vector(x.clone()))).collect();
    let enc = bilstm.encode(&mut g, &nodes, None)?;
    let rows = enc
        .joint
        .iter()
        .map(|&n| g.evaluate(n, params).map(Tensor::into_data))
        .collect::<Result<Vec<_>, _>>()?;
    EncodedSequence::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, GraphError};
    use crate::rng::stream;
    use rand::Rng;

    fn random_inputs(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, "inputs", &[]);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn bilstm_params(d_in: usize, d_h: usize, seed: u64) -> (BiLstm, ParamSet) {
        let b = BiLstm::new(d_in, d_h);
        let mut p = ParamSet::new();
        b.init(&mut p, &mut stream(seed, "init", &[]));
        // non-trivial biases so every parameter matters
        let mut rng = stream(seed, "bias", &[]);
        for (name, t) in p.iter_mut() {
            if name.contains(".b_") {
                let mut v = (**t).clone();
                v.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.5..0.5));
                *t = Arc::new(v);
            }
        }
        (b, p)
    }

    #[test]
    fn zero_params_give_zero_states() {
        let (b, mut p) = bilstm_params(3, 2, 1);
        for t in p.values_mut() {
            *t = Arc::new(Tensor::zeros(t.shape()));
        }
        let enc = bilstm_encode(&p, &b, &random_inputs(4, 3, 2)).unwrap();
        assert_eq!(enc.width(), 4);
        assert!(enc.0.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_step_matches_equations() {
        let lstm = Lstm::new("l", 1, 1);
        let vals = [
            ("w_xi", 0.5),
            ("w_hi", -0.3),
            ("b_i", 0.1),
            ("w_xf", 0.2),
            ("w_hf", 0.4),
            ("b_f", 1.0),
            ("w_xc", -0.7),
            ("w_hc", 0.6),
            ("b_c", 0.05),
            ("w_xo", 0.9),
            ("w_ho", -0.2),
            ("b_o", -0.1),
        ];
        let mut p = ParamSet::new();
        for (n, v) in vals {
            let shape: &[usize] = if n.starts_with('b') { &[1] } else { &[1, 1] };
            p.insert(format!("l.{n}"), Arc::new(Tensor::filled(shape, v)));
        }
        let (x, h0, c0) = (0.8, -0.25, 0.4);
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let i = s(0.5 * x - 0.3 * h0 + 0.1);
        let f = s(0.2 * x + 0.4 * h0 + 1.0);
        let c = f * c0 + i * (-0.7 * x + 0.6 * h0 + 0.05).tanh();
        let o = s(0.9 * x - 0.2 * h0 - 0.1);
        let h = o * c.tanh();
        let (hg, cg) = lstm_step(&p, &lstm, &[x], &[h0], &[c0]).unwrap();
        assert!((hg[0] - h).abs() < 1e-15 && (cg[0] - c).abs() < 1e-15);
    }

    #[test]
    fn recurrence_is_causal() {
        let (b, p) = bilstm_params(3, 4, 5);
        let xs = random_inputs(5, 3, 6);
        let base = bilstm_encode(&p, &b, &xs).unwrap();
        let mut moved = xs.clone();
        moved[3][1] += 0.5;
        let pert = bilstm_encode(&p, &b, &moved).unwrap();
        for t in 0..5 {
            let (f0, b0) = base.row(t).split_at(4);
            let (f1, b1) = pert.row(t).split_at(4);
            assert_eq!(f0 == f1, t < 3, "forward at {t}");
            assert_eq!(b0 == b1, t > 3, "backward at {t}");
        }
    }

    #[test]
    fn single_token_runs_each_direction_once() {
        let (b, p) = bilstm_params(3, 2, 7);
        let x = random_inputs(1, 3, 8);
        let enc = bilstm_encode(&p, &b, &x).unwrap();
        let z = vec![0.0; 2];
        let (hf, _) = lstm_step(&p, &b.forward, &x[0], &z, &z).unwrap();
        let (hb, _) = lstm_step(&p, &b.backward, &x[0], &z, &z).unwrap();
        assert_eq!(enc.row(0), [hf, hb].concat().as_slice());
    }

    #[test]
    fn masked_positions_carry_state() {
        let (b, p) = bilstm_params(2, 3, 9);
        let xs = random_inputs(3, 2, 10);
        let plain = bilstm_encode(&p, &b, &xs).unwrap();
        let mut g = Graph::new();
        let mut nodes: Vec<NodeId> = xs.iter().map(|x| g.constant(Tensor::vector(x.clone()))).collect();
        nodes.push(g.constant(Tensor::vector(vec![9.0, -9.0])));
        nodes.push(g.constant(Tensor::vector(vec![3.0, 3.0])));
        let enc = b.encode(&mut g, &nodes, Some(&[true, true, true, false, false])).unwrap();
        for t in 0..3 {
            assert_eq!(g.evaluate(enc.joint[t], &p).unwrap().data(), plain.row(t));
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (b, p) = bilstm_params(2, 2, 1);
        assert!(bilstm_encode(&p, &b, &[]).is_err());
    }

    #[test]
    fn gradient_of_last_forward_state() {
        let (b, p) = bilstm_params(3, 2, 11);
        let xs = random_inputs(4, 3, 12);
        let loss = |bind: &ParamSet| -> Result<(f64, crate::Gradients), GraphError> {
            let mut g = Graph::new();
            let nodes: Vec<NodeId> = xs.iter().map(|x| g.constant(Tensor::vector(x.clone()))).collect();
            let enc = b.encode(&mut g, &nodes, None).map_err(|e| GraphError::InvalidArgument {
                op: "encode",
                reason: e.to_string(),
            })?;
            let s = g.sum(enc.forward[3]);
            let v = g.evaluate(s, bind)?.item();
            Ok((v, g.backward(s)?))
        };
        let fw: ParamSet = p.iter().filter(|(k, _)| k.starts_with("lstm.fw")).map(|(k, v)| (k.clone(), v.clone())).collect();
        let all = p.clone();
        let r = finite_diff_check(
            |sub: &ParamSet| {
                let mut merged = all.clone();
                merged.extend(sub.iter().map(|(k, v)| (k.clone(), v.clone())));
                loss(&merged)
            },
            &fw,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error <= 1e-5, "{r:?}");
    }
}
