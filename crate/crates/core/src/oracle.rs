//! Exact ground truth on small enumerable worlds: optimal discriminator and
//! predictor, conditional entropy, concept posteriors and JSD. All in nats.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::datagen::{Dataset, Example};
use crate::error::{Error, Result};
use crate::Scalar;

pub const MAX_INPUTS: usize = 64;
const NORM_TOL: f64 = 1e-12;

/// One cell of the joint table `p(x, y, c, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldCell {
    pub x: usize,
    pub y: usize,
    pub c: Vec<u8>,
    pub u: u8,
    pub p: f64,
}

/// A finite joint distribution over inputs, labels, concepts and domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteWorld {
    pub xs: Vec<Vec<f64>>,
    pub joint: Vec<WorldCell>,
    pub q: usize,
    pub k: usize,
}

impl DiscreteWorld {
    pub fn new(xs: Vec<Vec<f64>>, joint: Vec<WorldCell>, q: usize, k: usize) -> Result<Self> {
        let w = Self { xs, joint, q, k };
        w.validate()?;
        Ok(w)
    }

    /// Empirical world of a list of `(x index, y, c, u)` samples.
    pub fn from_samples(xs: Vec<Vec<f64>>, q: usize, k: usize, samples: &[(usize, usize, Vec<u8>, u8)]) -> Result<Self> {
        let mut counts: BTreeMap<(usize, usize, Vec<u8>, u8), usize> = BTreeMap::new();
        for s in samples {
            *counts.entry(s.clone()).or_default() += 1;
        }
        let n = samples.len() as f64;
        let joint = counts.into_iter().map(|((x, y, c, u), m)| WorldCell { x, y, c, u, p: m as f64 / n }).collect();
        Self::new(xs, joint, q, k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract("DiscreteWorld", m));
        if self.xs.is_empty() || self.xs.len() > MAX_INPUTS {
            return bad(format!("|X| = {} outside 1..={MAX_INPUTS}", self.xs.len()));
        }
        let width = self.xs[0].len();
        for (i, a) in self.xs.iter().enumerate() {
            if a.len() != width {
                return bad(format!("x[{i}] has width {}, expected {width}", a.len()));
            }
            if self.xs[..i].contains(a) {
                return bad(format!("x[{i}] duplicates an earlier input"));
            }
        }
        if self.q < 2 {
            return bad(format!("Q = {} < 2", self.q));
        }
        let mut total = 0.0;
        let mut source = 0.0;
        for cell in &self.joint {
            if cell.x >= self.xs.len() || cell.y >= self.q || cell.c.len() != self.k || cell.u > 1 || cell.c.iter().any(|&v| v > 1) {
                return bad(format!("malformed cell {cell:?}"));
            }
            if !(cell.p >= 0.0) {
                return bad(format!("negative or NaN probability {}", cell.p));
            }
            total += cell.p;
            if cell.u == 0 {
                source += cell.p;
            }
        }
        if (total - 1.0).abs() > NORM_TOL {
            return bad(format!("probabilities sum to {total}"));
        }
        if (source - 0.5).abs() > NORM_TOL {
            return bad(format!("P(u = 0) = {source}, expected 1/2"));
        }
        Ok(())
    }

    pub fn p_x(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.xs.len()];
        for c in &self.joint {
            p[c.x] += c.p;
        }
        p
    }

    /// `p(x, y)` as a table `[|X|][Q]`.
    pub fn p_xy(&self) -> Vec<Vec<f64>> {
        let mut p = vec![vec![0.0; self.q]; self.xs.len()];
        for c in &self.joint {
            p[c.x][c.y] += c.p;
        }
        p
    }

    /// Exact-count datasets for each domain with `rows_per_domain` rows each.
    /// Every cell's mass must be a multiple of `1 / (2·rows_per_domain)`.
    pub fn expand(&self, rows_per_domain: usize) -> Result<(Dataset, Dataset)> {
        let scale = 2.0 * rows_per_domain as f64;
        let mut out = [Vec::new(), Vec::new()];
        for cell in &self.joint {
            let m = (cell.p * scale).round();
            if (m - cell.p * scale).abs() > 1e-6 {
                return Err(Error::contract("expand", format!("cell mass {} is not a multiple of 1/{scale}", cell.p)));
            }
            for _ in 0..m as usize {
                out[cell.u as usize].push(Example { x: self.xs[cell.x].clone(), y: cell.y, c: cell.c.clone(), u: cell.u });
            }
        }
        let [s, t] = out;
        let mk = |examples: Vec<Example>| Dataset {
            examples,
            spec: None,
            seed: None,
            x_dim: self.xs[0].len(),
            n_concepts: self.k,
        };
        Ok((mk(s), mk(t)))
    }

    /// One row per cell: `x_index,x,y,c,u,p` with `x` as `;`-joined values and
    /// `c` as a 0/1 pattern string.
    pub fn to_csv_string(&self) -> String {
        let mut s = format!("# q={} k={}\nx_index,x,y,c,u,p\n", self.q, self.k);
        for cell in &self.joint {
            let x: Vec<String> = self.xs[cell.x].iter().map(|v| format!("{v:?}")).collect();
            let c: String = cell.c.iter().map(|v| if *v == 1 { '1' } else { '0' }).collect();
            let _ = writeln!(s, "{},{},{},{},{},{:?}", cell.x, x.join(";"), cell.y, c, cell.u, cell.p);
        }
        s
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let perr = |line: usize, d: String| Error::Parse { line, detail: d };
        let mut lines = text.lines().enumerate();
        let (_, meta) = lines.next().ok_or_else(|| perr(1, "empty input".into()))?;
        let mut q = None;
        let mut k = None;
        for tok in meta.trim_start_matches('#').split_whitespace() {
            match tok.split_once('=') {
                Some(("q", v)) => q = v.parse().ok(),
                Some(("k", v)) => k = v.parse().ok(),
                _ => return Err(perr(1, format!("unexpected token {tok:?}"))),
            }
        }
        let (q, k) = q.zip(k).ok_or_else(|| perr(1, "missing q or k".into()))?;
        match lines.next() {
            Some((_, "x_index,x,y,c,u,p")) => {}
            _ => return Err(perr(2, "bad header".into())),
        }
        let mut xs: Vec<Option<Vec<f64>>> = Vec::new();
        let mut joint = Vec::new();
        for (i, line) in lines {
            let ln = i + 1;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(perr(ln, format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| perr(ln, format!("{s:?}: {e}")));
            let xi = num(f[0])?;
            let x = f[1]
                .split(';')
                .map(|v| v.parse::<f64>().map_err(|e| perr(ln, format!("{v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if xs.len() <= xi {
                xs.resize(xi + 1, None);
            }
            match &xs[xi] {
                Some(prev) if *prev != x => return Err(perr(ln, format!("x_index {xi} has two values"))),
                _ => xs[xi] = Some(x),
            }
            let c = f[3]
                .chars()
                .map(|ch| match ch {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    _ => Err(perr(ln, format!("bad concept pattern {:?}", f[3]))),
                })
                .collect::<Result<Vec<u8>>>()?;
            let u = num(f[4])? as u8;
            let p = f[5].parse::<f64>().map_err(|e| perr(ln, format!("{:?}: {e}", f[5])))?;
            joint.push(WorldCell { x: xi, y: num(f[2])?, c, u, p });
        }
        let xs = xs
            .into_iter()
            .enumerate()
            .map(|(i, x)| x.ok_or_else(|| perr(0, format!("x_index {i} never appears"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(xs, joint, q, k)
    }
}

/// `D*(v) = p_T(v) / (p_S(v) + p_T(v))` pointwise.
pub fn optimal_discriminator<T: Scalar>(p_s: &[T], p_t: &[T]) -> Result<Vec<T>> {
    if p_s.len() != p_t.len() {
        return Err(Error::dim("optimal_discriminator", format!("{} vs {} points", p_s.len(), p_t.len())));
    }
    p_s.iter()
        .zip(p_t)
        .enumerate()
        .map(|(i, (&s, &t))| {
            if s < T::zero() || t < T::zero() || !(s + t > T::zero()) {
                Err(Error::Domain(format!("densities ({s}, {t}) at point {i} give no discriminator")))
            } else {
                Ok(t / (s + t))
            }
        })
        .collect()
}

fn entropy(p: &[f64]) -> f64 {
    let z: f64 = p.iter().sum();
    if z <= 0.0 {
        return 0.0;
    }
    -p.iter().filter(|&&v| v > 0.0).map(|&v| (v / z) * (v / z).ln()).sum::<f64>()
}

/// `Σₓ p(x)·H(y | x)` by enumeration.
pub fn conditional_entropy_y_given_x(world: &DiscreteWorld) -> f64 {
    world.p_xy().iter().map(|row| row.iter().sum::<f64>() * entropy(row)).sum()
}

/// `P(c_i = 1 | x)` as `[|X|][K]`; rows for inputs with zero mass are NaN.
pub fn concept_posterior(world: &DiscreteWorld) -> Vec<Vec<f64>> {
    let px = world.p_x();
    let mut num = vec![vec![0.0; world.k]; world.xs.len()];
    for cell in &world.joint {
        for (i, &c) in cell.c.iter().enumerate() {
            if c == 1 {
                num[cell.x][i] += cell.p;
            }
        }
    }
    num.into_iter()
        .zip(px)
        .map(|(row, p)| row.into_iter().map(|v| if p > 0.0 { v / p } else { f64::NAN }).collect())
        .collect()
}

/// `½KL(p‖m) + ½KL(q‖m)` with `m = (p + q)/2` and `0·ln 0 = 0`.
pub fn exact_jsd<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::dim("exact_jsd", format!("supports of size {} and {}", p.len(), q.len())));
    }
    let tol = T::lit(1e-9);
    for (name, d) in [("p", p), ("q", q)] {
        let s: T = d.iter().copied().sum();
        if d.iter().any(|&v| !(v >= T::zero())) || (s - T::one()).abs() > tol {
            return Err(Error::contract("exact_jsd", format!("{name} is not a normalized distribution (sum {s})")));
        }
    }
    let half = T::lit(0.5);
    let mut acc = T::zero();
    for (&a, &b) in p.iter().zip(q) {
        let m = half * (a + b);
        if a > T::zero() {
            acc += half * a * (a / m).ln();
        }
        if b > T::zero() {
            acc += half * b * (b / m).ln();
        }
    }
    Ok(acc.max(T::zero()).min(T::LN_2()))
}

/// Bayes-optimal predictor over the embedding induced by `embedding_map`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalPredictor {
    /// Distinct embeddings in first-seen order over `xs`.
    pub embeddings: Vec<Vec<f64>>,
    /// `P(y | v)` per distinct embedding.
    pub probs: Vec<Vec<f64>>,
    /// Index into `embeddings` for each input.
    pub assignment: Vec<usize>,
}

impl OptimalPredictor {
    /// `P(y | E(x))` for input index `x`.
    pub fn for_input(&self, x: usize) -> &[f64] {
        &self.probs[self.assignment[x]]
    }
}

pub fn optimal_predictor(world: &DiscreteWorld, embedding_map: impl Fn(&[f64]) -> Vec<f64>) -> OptimalPredictor {
    let mut embeddings: Vec<Vec<f64>> = Vec::new();
    let mut assignment = Vec::with_capacity(world.xs.len());
    for x in &world.xs {
        let v = embedding_map(x);
        let key = |a: &Vec<f64>| a.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        let kv = key(&v);
        let idx = match embeddings.iter().position(|e| key(e) == kv) {
            Some(i) => i,
            None => {
                embeddings.push(v);
                embeddings.len() - 1
            }
        };
        assignment.push(idx);
    }
    let mut mass = vec![vec![0.0; world.q]; embeddings.len()];
    for (x, row) in world.p_xy().iter().enumerate() {
        for (y, p) in row.iter().enumerate() {
            mass[assignment[x]][y] += p;
        }
    }
    let probs = mass
        .into_iter()
        .map(|row| {
            let z: f64 = row.iter().sum();
            row.into_iter().map(|v| if z > 0.0 { v / z } else { f64::NAN }).collect()
        })
        .collect();
    OptimalPredictor { embeddings, probs, assignment }
}

/// Expected cross-entropy `E[−ln P̂(y | x)]` of a per-input class table.
pub fn expected_cross_entropy(world: &DiscreteWorld, table: impl Fn(usize) -> Vec<f64>) -> f64 {
    let mut s = 0.0;
    for (x, row) in world.p_xy().iter().enumerate() {
        let pred = table(x);
        for (y, &p) in row.iter().enumerate() {
            if p > 0.0 {
                s -= p * pred[y].ln();
            }
        }
    }
    s
}

pub fn gaussian_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// Composite Simpson's rule on `[lo, hi]` with `n` (rounded up to even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let n = (n.max(2) + 1) & !1;
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + h * i as f64);
    }
    s * h / 3.0
}

/// JSD between two 1D densities by Simpson quadrature on `[lo, hi]`.
pub fn jsd_quadrature(p: impl Fn(f64) -> f64, q: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    simpson(
        |x| {
            let (a, b) = (p(x), q(x));
            let m = 0.5 * (a + b);
            0.5 * term(a, m) + 0.5 * term(b, m)
        },
        lo,
        hi,
        n,
    )
}
