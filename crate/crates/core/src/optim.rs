//! SGD and Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self { kind: OptimizerKind::Adam, ..Self::sgd(lr, weight_decay) }
    }
}

/// Adam moments for one parameter block; unused by SGD.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

/// One in-place update of a parameter block.
///
/// SGD: `p ← p − lr·g − lr·wd·p`. Adam: bias-corrected moments, then the same
/// decoupled decay on the pre-update value.
pub fn optimizer_update<T: Scalar>(param: &mut [T], grad: &[T], state: &mut BlockState<T>, cfg: &OptimConfig) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::dim("optimizer_update", format!("param {} vs grad {}", param.len(), grad.len())));
    }
    let lr = T::lit(cfg.lr);
    let decay = T::lit(cfg.lr * cfg.weight_decay);
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, &g) in param.iter_mut().zip(grad) {
                *p = *p - lr * g - decay * *p;
            }
        }
        OptimizerKind::Adam => {
            if state.m.len() != param.len() {
                state.m = vec![T::zero(); param.len()];
                state.v = vec![T::zero(); param.len()];
                state.step = 0;
            }
            state.step += 1;
            let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
            let c1 = T::one() - b1.powi(state.step as i32);
            let c2 = T::one() - b2.powi(state.step as i32);
            let eps = T::lit(cfg.eps);
            for i in 0..param.len() {
                let g = grad[i];
                state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
                state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                let p = param[i];
                param[i] = p - lr * m_hat / (v_hat.sqrt() + eps) - decay * p;
            }
        }
    }
    Ok(())
}

/// Optimizer over a fixed, ordered list of parameter blocks.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub config: OptimConfig,
    states: Vec<BlockState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimConfig, n_blocks: usize) -> Self {
        Self { config, states: vec![BlockState::default(); n_blocks] }
    }

    pub fn step<'a>(&mut self, blocks: impl IntoIterator<Item = &'a mut [T]>, grads: &[Vec<T>]) -> Result<()> {
        let mut n = 0;
        for (i, block) in blocks.into_iter().enumerate() {
            let state = self
                .states
                .get_mut(i)
                .ok_or_else(|| Error::dim("optimizer", format!("block {i} has no state")))?;
            optimizer_update(block, &grads[i], state, &self.config)?;
            n += 1;
        }
        if n != grads.len() {
            return Err(Error::dim("optimizer", format!("{n} blocks, {} gradients", grads.len())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        for cfg in [OptimConfig::sgd(0.1, 0.0), OptimConfig::adam(0.1, 0.0)] {
            let mut p = vec![1.0, -2.0, 3.5];
            let mut s = BlockState::default();
            for _ in 0..5 {
                optimizer_update(&mut p, &[0.0; 3], &mut s, &cfg).unwrap();
            }
            assert_eq!(p, vec![1.0, -2.0, 3.5]);
        }
    }

    #[test]
    fn sgd_one_step() {
        let mut p = vec![1.0_f64];
        optimizer_update(&mut p, &[1.0], &mut BlockState::default(), &OptimConfig::sgd(0.1, 0.0)).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        let mut p = vec![1.0_f64];
        optimizer_update(&mut p, &[0.0], &mut BlockState::default(), &OptimConfig::sgd(0.1, 0.5)).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized_regardless_of_gradient_scale() {
        for g in [1e-4_f64, 0.3, 50.0, -7.0] {
            let mut p = vec![0.0_f64];
            optimizer_update(&mut p, &[g], &mut BlockState::default(), &OptimConfig::adam(1e-3, 0.0)).unwrap();
            assert!((p[0].abs() - 1e-3).abs() < 1e-6, "g = {g}: {}", p[0]);
            assert!(p[0].signum() == -g.signum());
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut p = vec![0.0; 2];
        let r = optimizer_update(&mut p, &[0.0], &mut BlockState::default(), &OptimConfig::sgd(0.1, 0.0));
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}
