use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::svg::{line_chart, Series};
use super::{histogram_jsd, kde_curve, silverman_bandwidth};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::Scalar;

const GRID_POINTS: usize = 1024;
const HIST_BINS: usize = 10;

/// Per-concept comparison of predicted-concept distributions across domains.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptDistribution {
    pub concept: usize,
    pub grid: Vec<f64>,
    /// `None` when the sample is degenerate and no bandwidth exists.
    pub source_pred_density: Option<Vec<f64>>,
    pub target_pred_density: Option<Vec<f64>>,
    pub target_truth_density: Option<Vec<f64>>,
    pub source_pred_mean: f64,
    pub target_pred_mean: f64,
    pub target_truth_freq: f64,
    /// Histogram JSD on `[0, 1]` between source and target `ĉ`.
    pub jsd_source_vs_target: f64,
    /// Histogram JSD on `[0, 1]` between target `ĉ` and target ground truth.
    pub jsd_target_vs_truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub concepts: Vec<ConceptDistribution>,
}

impl DistributionReport {
    /// Mean over concepts of the target `ĉ` vs ground-truth histogram JSD.
    pub fn mean_target_vs_truth(&self) -> f64 {
        self.concepts.iter().map(|c| c.jsd_target_vs_truth).sum::<f64>() / self.concepts.len().max(1) as f64
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "concept,source_pred_mean,target_pred_mean,target_truth_freq,jsd_source_vs_target,jsd_target_vs_truth\n",
        );
        for c in &self.concepts {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                c.concept, c.source_pred_mean, c.target_pred_mean, c.target_truth_freq, c.jsd_source_vs_target, c.jsd_target_vs_truth
            );
        }
        s
    }

    /// Write `concepts.csv`, one density CSV and one SVG per concept into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: String, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put("concepts.csv".into(), self.summary_csv())?;
        for c in &self.concepts {
            let cell = |d: &Option<Vec<f64>>, i: usize| d.as_ref().map_or("".to_string(), |v| format!("{:.6e}", v[i]));
            let mut csv = String::from("x,source_pred,target_pred,target_truth\n");
            for (i, x) in c.grid.iter().enumerate() {
                let _ = writeln!(
                    csv,
                    "{x:.6},{},{},{}",
                    cell(&c.source_pred_density, i),
                    cell(&c.target_pred_density, i),
                    cell(&c.target_truth_density, i)
                );
            }
            put(format!("concept_{}_density.csv", c.concept), csv)?;
            let mut series = Vec::new();
            for (name, d) in [
                ("source ĉ", &c.source_pred_density),
                ("target ĉ", &c.target_pred_density),
                ("target truth", &c.target_truth_density),
            ] {
                if let Some(ys) = d {
                    series.push(Series { name, xs: &c.grid, ys });
                }
            }
            put(format!("concept_{}_density.svg", c.concept), line_chart(&format!("concept {}", c.concept), "value", &series))?;
        }
        Ok(())
    }
}

fn column<T: Scalar>(data: &[T], k: usize, j: usize) -> Vec<f64> {
    data.iter().skip(j).step_by(k).map(|v| v.to_f64_lossy()).collect()
}

pub fn distribution_report<T: Scalar>(params: &ModelParams<T>, source: &Dataset, target: &Dataset) -> Result<DistributionReport> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::contract("distribution_report", "empty dataset"));
    }
    let k = params.config.n_concepts;
    let s = params.infer(&source.x_tensor::<T>(&source.all_indices()))?;
    let t = params.infer(&target.x_tensor::<T>(&target.all_indices()))?;
    let mut concepts = Vec::with_capacity(k);
    for j in 0..k {
        let sp = column(s.c_hat.data(), k, j);
        let tp = column(t.c_hat.data(), k, j);
        let tt: Vec<f64> = target.examples.iter().map(|e| e.c[j] as f64).collect();
        let samples = [&sp, &tp, &tt];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for x in samples {
            let pad = silverman_bandwidth(x).map(|h| 5.0 * h).unwrap_or(0.0);
            lo = lo.min(x.iter().copied().fold(f64::INFINITY, f64::min) - pad);
            hi = hi.max(x.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad);
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        let grid: Vec<f64> = (0..GRID_POINTS).map(|i| lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64).collect();
        let dens = |x: &[f64]| kde_curve(x, &grid).ok();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        concepts.push(ConceptDistribution {
            concept: j,
            source_pred_density: dens(&sp),
            target_pred_density: dens(&tp),
            target_truth_density: dens(&tt),
            grid,
            source_pred_mean: mean(&sp),
            target_pred_mean: mean(&tp),
            target_truth_freq: mean(&tt),
            jsd_source_vs_target: histogram_jsd(&sp, &tp, HIST_BINS, Some((0.0, 1.0)))?,
            jsd_target_vs_truth: histogram_jsd(&tp, &tt, HIST_BINS, Some((0.0, 1.0)))?,
        });
    }
    Ok(DistributionReport { concepts })
}
