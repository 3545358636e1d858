//! A reduced adversarial game for checking the relaxed-alignment equilibrium.
//!
//! Source embeddings are fixed draws from `N(source_mean, I)`. Target
//! embeddings are `x + θ` for fixed draws `x ~ N(target_mean, I)` and a
//! learnable shift `θ`, which plays the encoder. A small MLP discriminator
//! minimizes the domain loss; the encoder ascends `min(L_d, τ)`, so it stops
//! moving once the discriminator can no longer push `L_d` below `τ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::probe::full_batch_gradient;
use crate::losses::{discriminator_loss, relaxed_discriminator_loss};
use crate::model::{mlp_forward, Mlp};
use crate::optim::{OptimConfig, Optimizer};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    pub dim: usize,
    /// Samples per domain.
    pub n: usize,
    pub source_mean: f64,
    pub target_mean: f64,
    pub tau: f64,
    pub d_hidden: Vec<usize>,
    /// Adam learning rate of the discriminator.
    pub d_lr: f64,
    /// Discriminator updates per encoder update.
    pub d_steps: usize,
    /// Gradient-ascent rate of the shift.
    pub e_lr: f64,
    /// Largest allowed change of any shift coordinate per update.
    pub e_max_step: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            n: 1000,
            source_mean: 0.0,
            target_mean: 3.5,
            tau: 0.5,
            d_hidden: vec![16],
            d_lr: 1e-2,
            d_steps: 10,
            e_lr: 1.0,
            e_max_step: 0.02,
            iterations: 600,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameOutcome {
    pub shift: Vec<f64>,
    /// Discriminator loss seen by the encoder at every iteration.
    pub l_d_history: Vec<f64>,
    pub source: Vec<Vec<f64>>,
    /// Target embeddings under the final shift.
    pub target: Vec<Vec<f64>>,
}

impl GameOutcome {
    /// Mean of the last `window` entries of the loss history.
    pub fn tail_l_d(&self, window: usize) -> f64 {
        let w = window.clamp(1, self.l_d_history.len().max(1));
        let tail = &self.l_d_history[self.l_d_history.len().saturating_sub(w)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

fn draws(n: usize, dim: usize, mean: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = Normal::new(mean, 1.0).expect("unit variance");
    (0..n * dim).map(|_| d.sample(rng)).collect()
}

pub fn run_game(cfg: &GameConfig) -> Result<GameOutcome> {
    if cfg.dim == 0 || cfg.n < 2 || cfg.d_steps == 0 {
        return Err(Error::Config("game needs dim >= 1, n >= 2 and d_steps >= 1".into()));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::Config(format!("relaxation threshold must be positive, got {}", cfg.tau)));
    }
    let (n, dim) = (cfg.n, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let xs = Tensor::new(vec![n, dim], draws(n, dim, cfg.source_mean, &mut rng))?;
    let xt = Tensor::new(vec![n, dim], draws(n, dim, cfg.target_mean, &mut rng))?;
    let mut dims = vec![dim];
    dims.extend(&cfg.d_hidden);
    dims.push(1);
    let mut disc: Mlp<f64> = Mlp::new(&dims, false, &mut rng);
    let mut opt = Optimizer::new(OptimConfig::adam(cfg.d_lr, 0.0), 2 * disc.layers.len());
    let mut shift = vec![0.0; dim];
    let mut u = vec![0.0; n];
    u.resize(2 * n, 1.0);
    let mut history = Vec::with_capacity(cfg.iterations);

    let shifted = |shift: &[f64]| -> Vec<f64> {
        xt.data().iter().enumerate().map(|(i, v)| v + shift[i % dim]).collect()
    };
    for _ in 0..cfg.iterations {
        let mut both = xs.data().to_vec();
        both.extend(shifted(&shift));
        let both = Tensor::new(vec![2 * n, dim], both)?;
        for _ in 0..cfg.d_steps {
            let (_, grads) = full_batch_gradient(&disc, &both, &u)?;
            let blocks = disc.layers.iter_mut().flat_map(|l| [l.w.data_mut(), l.b.data_mut()]);
            opt.step(blocks, &grads)?;
        }

        let mut tape = Tape::new();
        let theta = tape.param(Tensor::new(vec![dim], shift.clone())?);
        let s = tape.constant(xs.clone());
        let t0 = tape.constant(xt.clone());
        let t = tape.add_bias(t0, theta)?;
        let layers: Vec<_> = disc
            .layers
            .iter()
            .map(|l| (tape.constant(l.w.clone()), tape.constant(l.b.clone())))
            .collect();
        let mut probs = Vec::new();
        for x in [s, t] {
            let logit = mlp_forward(&mut tape, &layers, x, false)?;
            probs.push(tape.sigmoid(logit));
        }
        let l_d = discriminator_loss(&mut tape, probs[0], probs[1])?;
        let relaxed = relaxed_discriminator_loss(&mut tape, l_d, cfg.tau)?;
        let value = tape.scalar_value(l_d);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "game".into(), epoch: 0, step: history.len() });
        }
        history.push(value);
        tape.backward(relaxed)?;
        let g = tape.grad_or_zero(theta);
        for (s, gi) in shift.iter_mut().zip(g) {
            *s += (cfg.e_lr * gi).clamp(-cfg.e_max_step, cfg.e_max_step);
        }
    }
    let rows = |data: &[f64]| data.chunks(dim).map(<[f64]>::to_vec).collect::<Vec<_>>();
    Ok(GameOutcome {
        target: rows(&shifted(&shift)),
        source: rows(xs.data()),
        shift,
        l_d_history: history,
    })
}
