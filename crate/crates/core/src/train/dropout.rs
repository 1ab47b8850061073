use rand::Rng;

use crate::autodiff::Tensor;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 − rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Tensor {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    let keep = 1.0 / (1.0 - rate);
    let data = (0..len)
        .map(|_| if rate > 0.0 && rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::vector(data)
}

/// Applies inverted dropout in train mode and the identity in eval mode.
pub fn apply_dropout(x: &[f64], rate: f64, mode: Mode, seed: u64) -> Vec<f64> {
    if mode == Mode::Eval || rate == 0.0 || x.is_empty() {
        return x.to_vec();
    }
    let mask = dropout_mask(x.len(), rate, &mut rng::stream(seed, "dropout", &[]));
    x.iter().zip(mask.data()).map(|(v, m)| v * m).collect()
}
