//! Target-domain metrics, concept intervention, and distribution diagnostics.

mod audit;
mod jsd;
mod kde;
pub(crate) mod probe;
mod report;
pub mod svg;

pub use audit::{bound_audit, BoundAudit};
pub use jsd::histogram_jsd;
pub use kde::{kde_curve, silverman_bandwidth, trapezoid};
pub use probe::{probe_jsd, train_probe, whiten, LossMonitor, Probe, ProbeConfig, ProbeEstimate, Verdict};
pub use report::{distribution_report, ConceptDistribution, DistributionReport};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, assemble_embedding, ModelParams};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub class_acc: f64,
    /// Mean over concepts of binary accuracy at threshold 0.5.
    pub concept_acc: f64,
    /// Macro F1 over concepts; a concept with no positives and no predicted
    /// positives scores 1.
    pub concept_f1: f64,
    pub n: usize,
}

/// Metrics from explicit predictions. `c_prob` and `c_true` are row-major `[n × K]`.
pub fn metrics_from_predictions(pred: &[usize], labels: &[usize], c_prob: &[f64], c_true: &[u8], k: usize) -> Result<MetricsReport> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::contract("evaluate", "empty dataset"));
    }
    if pred.len() != n || c_prob.len() != n * k || c_true.len() != n * k {
        return Err(Error::dim("evaluate", "prediction and label lengths differ"));
    }
    let class_acc = pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / n as f64;
    let mut acc_sum = 0.0;
    let mut f1_sum = 0.0;
    for j in 0..k {
        let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..n {
            let p = c_prob[i * k + j] >= 0.5;
            let t = c_true[i * k + j] == 1;
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
            correct += (p == t) as usize;
        }
        acc_sum += correct as f64 / n as f64;
        let denom = 2 * tp + fp + fn_;
        f1_sum += if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    let kf = k.max(1) as f64;
    Ok(MetricsReport { class_acc, concept_acc: acc_sum / kf, concept_f1: f1_sum / kf, n })
}

/// Class accuracy (argmax), concept accuracy and macro concept F1 on `ds`.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, ds: &Dataset) -> Result<MetricsReport> {
    intervene(params, ds, 0.0, 0)
}

/// Replace a random `⌊ratio·K⌋` subset of each example's predicted concepts
/// with the ground truth, reassemble the embedding and re-predict.
///
/// Each example draws one permutation of the concept indices from `seed` and
/// takes its prefix, so larger ratios replace a superset of smaller ones.
pub fn intervene<T: Scalar>(params: &ModelParams<T>, ds: &Dataset, ratio: f64, seed: u64) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::contract("evaluate", "empty dataset"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::contract("intervene", format!("ratio {ratio} outside [0, 1]")));
    }
    let k = params.config.n_concepts;
    let n_replace = (ratio * k as f64 + 1e-9).floor() as usize;
    let idx = ds.all_indices();
    let x = ds.x_tensor::<T>(&idx);
    let inf = params.infer(&x)?;
    let weights = intervention_weights(&inf.c_hat, ds, n_replace, seed)?;
    let logits = if n_replace == 0 {
        inf.logits
    } else {
        let v = assemble_embedding(&weights, &inf.v_plus, &inf.v_minus)?;
        params.logits_for(&v)?
    };
    let pred = argmax_rows(&logits);
    let labels: Vec<usize> = ds.examples.iter().map(|e| e.y).collect();
    let probs: Vec<f64> = weights.data().iter().map(|v| v.to_f64_lossy()).collect();
    let truth: Vec<u8> = ds.examples.iter().flat_map(|e| e.c.iter().copied()).collect();
    metrics_from_predictions(&pred, &labels, &probs, &truth, k)
}

/// `ĉ` with `n_replace` entries per row overwritten by ground truth. Row `i`
/// uses the prefix of the `i`-th permutation drawn from `seed`.
pub fn intervention_weights<T: Scalar>(c_hat: &Tensor<T>, ds: &Dataset, n_replace: usize, seed: u64) -> Result<Tensor<T>> {
    let (rows, k) = c_hat.as_matrix();
    if rows != ds.len() || n_replace > k {
        return Err(Error::dim("intervene", format!("ĉ {:?} vs {} examples, {n_replace} replacements", c_hat.shape(), ds.len())));
    }
    let mut weights = c_hat.clone();
    if n_replace == 0 {
        return Ok(weights);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..k).collect();
    for (i, e) in ds.examples.iter().enumerate() {
        order.shuffle(&mut rng);
        for &j in &order[..n_replace] {
            weights.data_mut()[i * k + j] = T::from_count(e.c[j] as usize);
        }
    }
    Ok(weights)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterventionCurve {
    pub ratios: Vec<f64>,
    pub class_acc: Vec<f64>,
    pub concept_acc: Vec<f64>,
    pub seed: u64,
}

impl InterventionCurve {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("ratio,class_acc,concept_acc\n");
        for i in 0..self.ratios.len() {
            out.push_str(&format!("{},{:.17e},{:.17e}\n", self.ratios[i], self.class_acc[i], self.concept_acc[i]));
        }
        out
    }
}

pub fn intervention_curve<T: Scalar>(params: &ModelParams<T>, ds: &Dataset, ratios: &[f64], seed: u64) -> Result<InterventionCurve> {
    if ratios.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("intervention_curve", "ratios must be strictly increasing"));
    }
    let mut curve = InterventionCurve { ratios: ratios.to_vec(), class_acc: vec![], concept_acc: vec![], seed };
    for &r in ratios {
        let m = intervene(params, ds, r, seed)?;
        curve.class_acc.push(m.class_acc);
        curve.concept_acc.push(m.concept_acc);
    }
    Ok(curve)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &t in &idx[i..=j] {
                r[t] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Ground-truth-weighted (ideal) embeddings for every example in `ds`.
/// Mean over rows of `‖ĉ − c‖₂` for row-major `[n × K]` tables.
pub fn concept_error_term(c_hat: &[f64], c: &[u8], k: usize) -> f64 {
    let n = c.len() / k.max(1);
    (0..n)
        .map(|i| (0..k).map(|j| (c_hat[i * k + j] - c[i * k + j] as f64).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n.max(1) as f64
}

pub fn ideal_embeddings<T: Scalar>(params: &ModelParams<T>, ds: &Dataset) -> Result<Tensor<T>> {
    let idx = ds.all_indices();
    let (vp, vm) = params.concept_heads_forward(&ds.x_tensor::<T>(&idx))?;
    let k = params.config.n_concepts;
    let c = ds.examples.iter().flat_map(|e| e.c.iter().map(|&v| T::from_count(v as usize))).collect();
    let weights = Tensor::new(vec![ds.len(), k], c)?;
    assemble_embedding(&weights, &vp, &vm)
}
