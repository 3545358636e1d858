//! Synthetic source/target data with known concepts and a controllable shift,
//! plus the on-disk CSV format and paired minibatch sampling.
//!
//! Two shift mechanisms are available. Nuisance features correlate with the
//! class at a per-domain strength (flip the sign across domains to mimic a
//! background that reverses its association with the label), and each concept
//! may have its Bernoulli mean offset in the target domain.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

const PROB_FLOOR: f64 = 0.02;
const PROB_CEIL: f64 = 0.98;

/// One record. `u` is 0 for source, 1 for target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
    pub c: Vec<u8>,
    pub u: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    /// Number of classes.
    pub q: usize,
    /// Number of binary concepts.
    pub k: usize,
    /// Input dimension; at least `k + spurious_dim`.
    pub d: usize,
    /// `q × k` table of Bernoulli means `P(c_k = 1 | y)` in the source domain.
    pub b: Vec<Vec<f64>>,
    /// Probability that a recorded concept label is flipped.
    pub rho: f64,
    pub signal_gain: f64,
    pub spurious_dim: usize,
    pub spurious_corr_source: f64,
    pub spurious_corr_target: f64,
    /// Centre of the nuisance feature clusters, `N(±mean, 1)`.
    #[serde(default = "default_spurious_mean")]
    pub spurious_mean: f64,
    pub noise_sigma: f64,
    /// Additive per-concept offset to `b` in the target domain.
    pub marginal_gap: Vec<f64>,
}

fn default_spurious_mean() -> f64 {
    1.0
}

impl ShiftSpec {
    /// Six concepts, two classes, concept gap of 0.15 on the first two
    /// concepts and nuisance correlation flipping from +0.9 to −0.9. The two
    /// shifted concepts carry most of the class signal.
    pub fn benchmark() -> Self {
        let b = vec![
            vec![0.05, 0.05, 0.4, 0.4, 0.4, 0.4],
            vec![0.8, 0.8, 0.6, 0.6, 0.6, 0.6],
        ];
        Self {
            q: 2,
            k: 6,
            d: 10,
            b,
            rho: 0.0,
            signal_gain: 2.0,
            spurious_dim: 4,
            spurious_corr_source: 0.9,
            spurious_corr_target: -0.9,
            spurious_mean: 1.0,
            noise_sigma: 1.0,
            marginal_gap: vec![0.15, 0.15, 0.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.q < 2 || self.k == 0 {
            return bad(format!("need q >= 2 and k >= 1 (q = {}, k = {})", self.q, self.k));
        }
        if self.d < self.k + self.spurious_dim {
            return bad(format!("d = {} < k + spurious_dim = {}", self.d, self.k + self.spurious_dim));
        }
        if self.b.len() != self.q || self.b.iter().any(|r| r.len() != self.k) {
            return bad(format!("b must be {} x {}", self.q, self.k));
        }
        if self.b.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("b entries must lie in [0, 1]".into());
        }
        if self.marginal_gap.len() != self.k {
            return bad(format!("marginal_gap must have {} entries", self.k));
        }
        if self.marginal_gap.iter().any(|g| !(-0.3..=0.3).contains(g)) {
            return bad("marginal_gap entries must lie in [-0.3, 0.3]".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]".into());
        }
        for (name, c) in [("source", self.spurious_corr_source), ("target", self.spurious_corr_target)] {
            if !(-1.0..=1.0).contains(&c) {
                return bad(format!("spurious_corr_{name} must lie in [-1, 1]"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0".into());
        }
        if !self.signal_gain.is_finite() || !self.spurious_mean.is_finite() {
            return bad("signal_gain and spurious_mean must be finite".into());
        }
        Ok(())
    }

    /// Clipped `P(c_k = 1 | y)` in the given domain.
    pub fn concept_mean(&self, y: usize, k: usize, u: u8) -> f64 {
        let gap = if u == 1 { self.marginal_gap[k] } else { 0.0 };
        (self.b[y][k].clamp(PROB_FLOOR, PROB_CEIL) + gap).clamp(PROB_FLOOR, PROB_CEIL)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub spec: Option<ShiftSpec>,
    pub seed: Option<u64>,
    pub x_dim: usize,
    pub n_concepts: usize,
}

impl Dataset {
    pub fn empty(x_dim: usize, n_concepts: usize) -> Self {
        Self { examples: Vec::new(), spec: None, seed: None, x_dim, n_concepts }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Class count implied by the spec, else by the largest label present.
    pub fn n_classes(&self) -> usize {
        match &self.spec {
            Some(s) => s.q,
            None => self.examples.iter().map(|e| e.y + 1).max().unwrap_or(0),
        }
    }

    /// All inputs as a `[n × D]` tensor.
    pub fn x_tensor<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let data = idx.iter().flat_map(|&i| self.examples[i].x.iter().map(|&v| T::lit(v))).collect();
        Tensor::new(vec![idx.len(), self.x_dim], data).expect("consistent x_dim")
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Empirical `P(c_k = 1)` per concept.
    pub fn concept_frequencies(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        (0..self.n_concepts)
            .map(|k| self.examples.iter().filter(|e| e.c[k] == 1).count() as f64 / n)
            .collect()
    }

    /// Stable content hash of the examples (hex SHA-256 of the CSV body).
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.to_csv_string().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn header(&self) -> String {
        let mut cols: Vec<String> = (0..self.x_dim).map(|i| format!("x_{i}")).collect();
        cols.extend((0..self.n_concepts).map(|i| format!("c_{i}")));
        cols.push("y".into());
        cols.push("u".into());
        cols.join(",")
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for e in &self.examples {
            for v in &e.x {
                let _ = write!(out, "{v:.16e},");
            }
            for c in &e.c {
                let _ = write!(out, "{c},");
            }
            let _ = writeln!(out, "{},{}", e.y, e.u);
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse { line: 1, detail: "missing header".into() })?;
        let cols: Vec<&str> = header.split(',').collect();
        let x_dim = cols.iter().take_while(|c| c.starts_with("x_")).count();
        let n_concepts = cols[x_dim..].iter().take_while(|c| c.starts_with("c_")).count();
        let ds = Self::empty(x_dim, n_concepts);
        if ds.header() != header {
            return Err(Error::Parse {
                line: 1,
                detail: format!("header does not match schema `{}`", ds.header()),
            });
        }
        let mut examples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            if line.is_empty() {
                continue;
            }
            examples.push(parse_row(line, x_dim, n_concepts, line_no)?);
        }
        Ok(Self { examples, ..ds })
    }
}

fn parse_row(line: &str, x_dim: usize, k: usize, line_no: usize) -> Result<Example> {
    let err = |detail: String| Error::Parse { line: line_no, detail };
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != x_dim + k + 2 {
        return Err(err(format!("expected {} fields, found {}", x_dim + k + 2, fields.len())));
    }
    let x = fields[..x_dim]
        .iter()
        .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad float `{f}`"))))
        .collect::<Result<Vec<_>>>()?;
    let c = fields[x_dim..x_dim + k]
        .iter()
        .map(|f| match *f {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            other => Err(err(format!("concept value `{other}` is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let y = fields[x_dim + k].parse::<usize>().map_err(|_| err(format!("bad label `{}`", fields[x_dim + k])))?;
    let u = match fields[x_dim + k + 1] {
        "0" => 0,
        "1" => 1,
        other => return Err(err(format!("domain flag `{other}` is not 0 or 1"))),
    };
    Ok(Example { x, y, c, u })
}

/// Draw `n_source` source and `n_target` target examples. Pure in `(spec, counts, seed)`.
pub fn generate(spec: &ShiftSpec, n_source: usize, n_target: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if n_source == 0 || n_target == 0 {
        return Err(Error::Spec("example counts must be positive".into()));
    }
    let make = |u: u8, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u as u64);
        let examples = (0..n).map(|_| draw_example(spec, u, &mut rng)).collect();
        Dataset { examples, spec: Some(spec.clone()), seed: Some(seed), x_dim: spec.d, n_concepts: spec.k }
    };
    Ok((make(0, n_source), make(1, n_target)))
}

fn draw_example(spec: &ShiftSpec, u: u8, rng: &mut ChaCha8Rng) -> Example {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let y = rng.gen_range(0..spec.q);
    let mut x = Vec::with_capacity(spec.d);
    let mut c = Vec::with_capacity(spec.k);
    for k in 0..spec.k {
        let truth = rng.gen_bool(spec.concept_mean(y, k, u));
        // Features follow the true concept; the recorded label may be flipped.
        let recorded = if spec.rho > 0.0 && rng.gen_bool(spec.rho) { !truth } else { truth };
        c.push(recorded as u8);
        let signed = if truth { 1.0 } else { -1.0 };
        x.push(spec.signal_gain * signed + spec.noise_sigma * unit.sample(rng));
    }
    if spec.spurious_dim > 0 {
        let corr = if u == 1 { spec.spurious_corr_target } else { spec.spurious_corr_source };
        // Class parity picks the sign that "matches" the label.
        let label_sign = if y % 2 == 1 { 1.0 } else { -1.0 };
        let matches = rng.gen_bool(((1.0 + corr) / 2.0).clamp(0.0, 1.0));
        let sign = if matches { label_sign } else { -label_sign };
        for _ in 0..spec.spurious_dim {
            x.push(sign * spec.spurious_mean + unit.sample(rng));
        }
    }
    while x.len() < spec.d {
        x.push(spec.noise_sigma * unit.sample(rng));
    }
    Example { x, y, c, u }
}

/// Labeled source minibatch.
#[derive(Debug, Clone)]
pub struct SourceBatch<T> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
    /// Row-major `[B × Q]` one-hot labels.
    pub y_onehot: Vec<T>,
    /// Row-major `[B × K]` binary concepts.
    pub c: Vec<T>,
}

/// Target minibatch: inputs only.
#[derive(Debug, Clone)]
pub struct TargetBatch<T> {
    pub x: Tensor<T>,
}

/// Index lists for one training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl BatchPair {
    pub fn source_batch<T: Scalar>(&self, ds: &Dataset, q: usize) -> SourceBatch<T> {
        source_batch(ds, &self.source, q)
    }

    pub fn target_batch<T: Scalar>(&self, ds: &Dataset) -> TargetBatch<T> {
        TargetBatch { x: ds.x_tensor(&self.target) }
    }
}

pub fn source_batch<T: Scalar>(ds: &Dataset, idx: &[usize], q: usize) -> SourceBatch<T> {
    let mut y_onehot = vec![T::zero(); idx.len() * q];
    let mut c = Vec::with_capacity(idx.len() * ds.n_concepts);
    let mut labels = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        let e = &ds.examples[i];
        y_onehot[r * q + e.y] = T::one();
        labels.push(e.y);
        c.extend(e.c.iter().map(|&v| T::from_count(v as usize)));
    }
    SourceBatch { x: ds.x_tensor(idx), labels, y_onehot, c }
}

/// Paired minibatches for one epoch.
///
/// The epoch has `max(|S|, |T|) / batch` steps. Each domain draws from a
/// stream of fresh permutations, so the shorter domain is recycled with a new
/// shuffle. Deterministic in `(seed, epoch)`.
pub fn minibatches(source: &Dataset, target: &Dataset, batch: usize, seed: u64, epoch: usize) -> Result<Vec<BatchPair>> {
    if batch == 0 {
        return Err(Error::contract("minibatches", "batch size must be positive"));
    }
    if batch > source.len().min(target.len()) {
        return Err(Error::contract(
            "minibatches",
            format!("batch {batch} exceeds smaller domain size {}", source.len().min(target.len())),
        ));
    }
    let steps = source.len().max(target.len()) / batch;
    let stream = |n: usize, domain: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * epoch as u64 + domain);
        let mut out = Vec::with_capacity(steps * batch);
        while out.len() < steps * batch {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            out.extend(perm);
        }
        out.truncate(steps * batch);
        out
    };
    let s = stream(source.len(), 0);
    let t = stream(target.len(), 1);
    Ok((0..steps)
        .map(|i| BatchPair {
            source: s[i * batch..(i + 1) * batch].to_vec(),
            target: t[i * batch..(i + 1) * batch].to_vec(),
        })
        .collect())
}
