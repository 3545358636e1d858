use crate::error::{Error, Result};

/// Jensen–Shannon divergence (nats) between the empirical histograms of two
/// scalar samples over `bins` equal-width bins on `[lo, hi]`.
///
/// Values outside the range are clamped into the end bins. When `range` is
/// `None` the pooled min and max are used.
pub fn histogram_jsd(a: &[f64], b: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("histogram_jsd", "empty sample"));
    }
    if bins == 0 {
        return Err(Error::contract("histogram_jsd", "zero bins"));
    }
    let (lo, hi) = range.unwrap_or_else(|| {
        let it = a.iter().chain(b);
        (it.clone().copied().fold(f64::INFINITY, f64::min), it.copied().fold(f64::NEG_INFINITY, f64::max))
    });
    let hist = |s: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in s {
            let t = if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
            let i = ((t * bins as f64).floor().max(0.0) as usize).min(bins - 1);
            h[i] += 1.0;
        }
        let n = s.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    };
    let (p, q) = (hist(a), hist(b));
    Ok(discrete_jsd(&p, &q))
}

/// JSD between two probability vectors on the same support.
pub(crate) fn discrete_jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            s += 0.5 * pi * (pi / m).ln();
        }
        if qi > 0.0 {
            s += 0.5 * qi * (qi / m).ln();
        }
    }
    s.max(0.0)
}
