use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::{Error, ParamSet, Result};

/// Per-epoch exponential decay of the base learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.01,
            decay: 0.95,
        }
    }
}

impl LrSchedule {
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        self.base * self.decay.powi(epoch as i32)
    }
}

/// `acc += g²; θ −= lr · g / (√acc + ε)`, elementwise.
pub fn adagrad_step(param: &mut [f64], grad: &[f64], acc: &mut [f64], lr: f64, epsilon: f64) {
    debug_assert!(param.len() == grad.len() && grad.len() == acc.len());
    for ((p, &g), a) in param.iter_mut().zip(grad).zip(acc.iter_mut()) {
        if g == 0.0 {
            continue;
        }
        *a += g * g;
        *p -= lr * g / (a.sqrt() + epsilon);
    }
}

/// AdaGrad accumulators for every parameter of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaGrad {
    pub epsilon: f64,
    pub accumulators: BTreeMap<String, Tensor>,
}

impl AdaGrad {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            accumulators: BTreeMap::new(),
        }
    }

    fn accumulator(&mut self, name: &str, shape: &[usize]) -> &mut Tensor {
        self.accumulators
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape))
    }

    /// Dense update of `params[name]`.
    pub fn step(&mut self, params: &mut ParamSet, name: &str, grad: &Tensor, lr: f64) -> Result<()> {
        let slot = params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
        if slot.shape() != grad.shape() {
            return Err(Error::Invalid(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                grad.shape(),
                slot.shape()
            )));
        }
        let eps = self.epsilon;
        let acc = self.accumulator(name, grad.shape());
        adagrad_step(Arc::make_mut(slot).data_mut(), grad.data(), acc.data_mut(), lr, eps);
        Ok(())
    }

    /// Sparse update of selected rows of a matrix parameter.
    pub fn step_rows(&mut self, params: &mut ParamSet, name: &str, rows: &[(usize, Vec<f64>)], lr: f64) -> Result<()> {
        let slot = params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
        let shape = slot.shape().to_vec();
        let eps = self.epsilon;
        let acc = self.accumulator(name, &shape);
        let param = Arc::make_mut(slot);
        for (r, g) in rows {
            if *r >= shape[0] || g.len() != param.cols() {
                return Err(Error::Invalid(format!("row gradient {r} does not fit {name} {shape:?}")));
            }
            adagrad_step(param.row_mut(*r), g, acc.row_mut(*r), lr, eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn learning_rate_decays_per_epoch() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_for_epoch(0), 0.01);
        assert!((s.lr_for_epoch(1) - 0.0095).abs() < 1e-15);
        assert!((s.lr_for_epoch(2) - 0.009025).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let (mut p, mut a) = (vec![1.5], vec![2.0]);
        adagrad_step(&mut p, &[0.0], &mut a, 0.01, 1e-8);
        assert_eq!((p[0], a[0]), (1.5, 2.0));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [-3.0, 0.2, 7.0] {
            let (mut p, mut a) = (vec![0.0], vec![0.0]);
            adagrad_step(&mut p, &[g], &mut a, 0.01, 1e-8);
            assert!((p[0] + 0.01 * f64::signum(g)).abs() < 1e-9);
        }
    }

    #[test]
    fn two_steps_accumulate() {
        let (mut p, mut a) = (vec![0.0], vec![0.0]);
        adagrad_step(&mut p, &[3.0], &mut a, 0.01, 1e-8);
        let before = p[0];
        adagrad_step(&mut p, &[4.0], &mut a, 0.01, 1e-8);
        assert_eq!(a[0], 25.0);
        assert!((p[0] - before + 0.01 * 4.0 / (5.0 + 1e-8)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn accumulators_never_decrease(grads in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..20)) {
            let (mut p, mut a) = (vec![0.0; 3], vec![0.0; 3]);
            for g in grads {
                let before = a.clone();
                adagrad_step(&mut p, &g, &mut a, 0.05, 1e-8);
                for (x, y) in a.iter().zip(&before) {
                    prop_assert!(x >= y && *x >= 0.0);
                }
            }
        }
    }
}
