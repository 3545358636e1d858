use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mlp_forward, Mlp};
use crate::optim::{OptimConfig, Optimizer};
use crate::tensor::{Tape, Tensor};

/// A probe that ends this far above the constant-predictor loss has failed.
const CHANCE_SLACK: f64 = 0.05;

/// Settings for the post-hoc discriminator probe used to estimate JSD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Stop once the loss improves by less than this between two evaluations.
    pub tol: f64,
    pub seed: u64,
    /// Rows kept per domain; `None` keeps `min(|a|, |b|)`.
    pub max_rows: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: vec![32], lr: 2e-2, max_steps: 3000, eval_every: 25, tol: 1e-5, seed: 0, max_rows: Some(4000) }
    }
}

/// A trained probe: a whitening transform followed by an MLP and a sigmoid.
#[derive(Debug, Clone)]
pub struct Probe {
    mean: Vec<f64>,
    /// Lower-triangular inverse Cholesky factor of the pooled covariance.
    whiten: Vec<f64>,
    mlp: Mlp<f64>,
}

/// Outcome of one periodic loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Continue,
    Converged,
    /// The loss rose at three consecutive evaluations.
    Diverged,
}

/// Tracks evaluated losses for the stopping and divergence rules.
#[derive(Debug, Clone)]
pub struct LossMonitor {
    tol: f64,
    last: f64,
    rises: usize,
}

impl LossMonitor {
    pub fn new(tol: f64) -> Self {
        Self { tol, last: f64::INFINITY, rises: 0 }
    }

    pub fn observe(&mut self, loss: f64) -> Verdict {
        let verdict = if loss > self.last {
            self.rises += 1;
            if self.rises >= 3 {
                Verdict::Diverged
            } else {
                Verdict::Continue
            }
        } else {
            self.rises = 0;
            if self.last - loss < self.tol {
                Verdict::Converged
            } else {
                Verdict::Continue
            }
        };
        self.last = loss;
        verdict
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeEstimate {
    /// Final balanced BCE of the probe, an estimate of the optimal discriminator loss.
    pub c_d: f64,
    /// `ln 2 − c_d`, clipped to `[0, ln 2]`.
    pub jsd: f64,
    pub steps: usize,
    pub converged: bool,
}

/// Pooled mean and inverse Cholesky factor so that `L⁻¹(x − μ)` has identity covariance.
pub fn whiten(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rows.len();
    let j = rows.first().map(Vec::len).unwrap_or(0);
    if n < 2 || j == 0 {
        return Err(Error::contract("whiten", format!("need at least 2 non-empty rows, got {n}")));
    }
    let mut mean = vec![0.0; j];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; j * j];
    for r in rows {
        for a in 0..j {
            let da = r[a] - mean[a];
            for b in 0..=a {
                cov[a * j + b] += da * (r[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    let trace: f64 = (0..j).map(|a| cov[a * j + a]).sum();
    let ridge = 1e-9 * trace / j as f64 + 1e-12;
    for a in 0..j {
        cov[a * j + a] += ridge;
    }
    let mut l = vec![0.0; j * j];
    for a in 0..j {
        for b in 0..=a {
            let s: f64 = cov[a * j + b] - (0..b).map(|t| l[a * j + t] * l[b * j + t]).sum::<f64>();
            if a == b {
                l[a * j + a] = s.max(ridge).sqrt();
            } else {
                l[a * j + b] = s / l[b * j + b];
            }
        }
    }
    let mut inv = vec![0.0; j * j];
    for col in 0..j {
        for a in col..j {
            let rhs = if a == col { 1.0 } else { 0.0 };
            let s: f64 = (col..a).map(|t| l[a * j + t] * inv[t * j + col]).sum();
            inv[a * j + col] = (rhs - s) / l[a * j + a];
        }
    }
    Ok((mean, inv))
}

impl Probe {
    fn transform(&self, rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
        let j = self.mean.len();
        let mut out = Vec::with_capacity(rows.len() * j);
        for r in rows {
            if r.len() != j {
                return Err(Error::dim("probe", format!("row width {} vs {j}", r.len())));
            }
            for a in 0..j {
                out.push((0..=a).map(|t| self.whiten[a * j + t] * (r[t] - self.mean[t])).sum());
            }
        }
        Tensor::new(vec![rows.len(), j], out)
    }

    /// Probability that each row comes from the second sample.
    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let x = self.transform(rows)?;
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let layers: Vec<_> = self
            .mlp
            .layers
            .iter()
            .map(|l| (tape.constant(l.w.clone()), tape.constant(l.b.clone())))
            .collect();
        let logit = mlp_forward(&mut tape, &layers, xi, false)?;
        let p = tape.sigmoid(logit);
        Ok(tape.value(p).to_vec())
    }
}

/// Rows per tape when accumulating a full-batch gradient. Small tapes keep
/// every buffer on the allocator's fast path.
const CHUNK_ROWS: usize = 256;

/// Mean BCE over all rows of `x` and its gradient for every block, computed
/// chunk by chunk and summed with weights `chunk_len / n`.
pub(crate) fn full_batch_gradient(mlp: &Mlp<f64>, x: &Tensor<f64>, u: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    let (n, j) = x.as_matrix();
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = mlp.layers.iter().flat_map(|l| [vec![0.0; l.w.numel()], vec![0.0; l.b.numel()]]).collect();
    for start in (0..n).step_by(CHUNK_ROWS) {
        let end = (start + CHUNK_ROWS).min(n);
        let weight = (end - start) as f64 / n as f64;
        let mut tape = Tape::new();
        let chunk = Tensor::new(vec![end - start, j], x.data()[start * j..end * j].to_vec())?;
        let xi = tape.constant(chunk);
        let layers: Vec<_> = mlp.layers.iter().map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone()))).collect();
        let logit = mlp_forward(&mut tape, &layers, xi, false)?;
        let p = tape.sigmoid(logit);
        let p = tape.reshape(p, &[end - start])?;
        let l = tape.binary_cross_entropy(p, &u[start..end])?;
        loss += weight * tape.scalar_value(l);
        let scaled = tape.scale(l, weight);
        tape.backward(scaled)?;
        for (g, id) in grads.iter_mut().zip(layers.iter().flat_map(|&(w, b)| [w, b])) {
            if let Some(d) = tape.grad(id) {
                g.iter_mut().zip(d).for_each(|(a, &b)| *a += b);
            }
        }
    }
    Ok((loss, grads))
}

/// Train a fresh discriminator to separate `a` (label 0) from `b` (label 1)
/// with full-batch Adam on balanced BCE.
pub fn train_probe(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &ProbeConfig) -> Result<(Probe, ProbeEstimate)> {
    let mut n = a.len().min(b.len());
    if let Some(m) = cfg.max_rows {
        n = n.min(m);
    }
    if n < 2 {
        return Err(Error::contract("probe", "each sample needs at least 2 rows"));
    }
    if cfg.eval_every == 0 || cfg.max_steps == 0 {
        return Err(Error::Config("probe eval_every and max_steps must be positive".into()));
    }
    let rows: Vec<Vec<f64>> = a[..n].iter().chain(&b[..n]).cloned().collect();
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::contract("probe", "non-finite input"));
    }
    let (mean, w) = whiten(&rows)?;
    let j = mean.len();
    let mut dims = vec![j];
    dims.extend(&cfg.hidden);
    dims.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = Probe { mean, whiten: w, mlp: Mlp::new(&dims, false, &mut rng) };
    let x = probe.transform(&rows)?;
    let mut u = vec![0.0; n];
    u.resize(2 * n, 1.0);

    let n_blocks = 2 * probe.mlp.layers.len();
    let mut opt = Optimizer::new(OptimConfig::adam(cfg.lr, 0.0), n_blocks);
    let mut monitor = LossMonitor::new(cfg.tol);
    let mut loss = f64::NAN;
    let mut converged = false;
    let mut steps = 0;
    while steps < cfg.max_steps {
        let (l, grads) = full_batch_gradient(&probe.mlp, &x, &u)?;
        loss = l;
        if !loss.is_finite() {
            return Err(Error::ProbeDiverged(format!("non-finite probe loss at step {steps}")));
        }
        if steps % cfg.eval_every == 0 {
            match monitor.observe(loss) {
                Verdict::Continue => {}
                Verdict::Converged => {
                    converged = true;
                    break;
                }
                Verdict::Diverged => {
                    return Err(Error::ProbeDiverged(format!(
                        "loss rose at 3 consecutive evaluations (step {steps}, loss {loss})"
                    )))
                }
            }
        }
        let blocks = probe.mlp.layers.iter_mut().flat_map(|l| [l.w.data_mut(), l.b.data_mut()]);
        opt.step(blocks, &grads)?;
        steps += 1;
    }
    let ln2 = std::f64::consts::LN_2;
    if loss > ln2 + CHANCE_SLACK {
        return Err(Error::ProbeDiverged(format!("probe stopped at loss {loss}, worse than chance")));
    }
    let est = ProbeEstimate { c_d: loss, jsd: (ln2 - loss).clamp(0.0, ln2), steps, converged };
    Ok((probe, est))
}

/// JSD estimate between two samples of row vectors, via a trained probe.
pub fn probe_jsd(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &ProbeConfig) -> Result<ProbeEstimate> {
    train_probe(a, b, cfg).map(|(_, e)| e)
}
