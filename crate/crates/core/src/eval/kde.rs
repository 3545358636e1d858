use crate::error::{Error, Result};

/// Silverman's rule of thumb, `1.06·σ̂·n^(-1/5)` with the unbiased sample deviation.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Bandwidth(format!("need at least 2 samples, got {n}")));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let h = 1.06 * var.sqrt() * (n as f64).powf(-0.2);
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Bandwidth(format!("degenerate sample (σ̂ = {})", var.sqrt())));
    }
    Ok(h)
}

/// Gaussian kernel density estimate of `samples` evaluated on `grid`.
pub fn kde_curve(samples: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let h = silverman_bandwidth(samples)?;
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&g| {
            let s: f64 = samples.iter().map(|&x| (-0.5 * ((g - x) / h).powi(2)).exp()).sum();
            s * norm
        })
        .collect())
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2).zip(ys.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum()
}
