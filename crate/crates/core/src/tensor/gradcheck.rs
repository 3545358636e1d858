use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |fd − ad| / max(1, |ad|)` over all checked coordinates.
    pub max_rel_error: f64,
    /// (parameter, flat index) of the worst coordinate.
    pub worst: (usize, usize),
    pub coords: usize,
}

/// Compare tape gradients of a scalar function against central differences.
///
/// `f` records the function on a fresh tape given leaf ids for `params`
/// (in order) and returns the scalar output node.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], h: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut reports = finite_diff_check_many(|t, ids| Ok(vec![f(t, ids)?]), params, h)?;
    Ok(reports.remove(0))
}

/// [`finite_diff_check`] for several scalar outputs of one recorded function.
/// Each perturbation is evaluated once for all outputs; one report per output.
pub fn finite_diff_check_many<T, F>(f: F, params: &[Tensor<T>], h: T) -> Result<Vec<GradCheckReport>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<Vec<NodeId>>,
{
    if !(h > T::zero()) {
        return Err(Error::contract("finite_diff_check", "step must be positive"));
    }
    let eval = |ps: &[Tensor<T>]| -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let outs = f(&mut tape, &ids)?;
        Ok(outs.into_iter().map(|o| tape.scalar_value(o)).collect())
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let outs = f(&mut tape, &ids)?;
    let mut analytic: Vec<Vec<Vec<T>>> = Vec::with_capacity(outs.len());
    for &out in &outs {
        tape.zero_grads();
        tape.backward(out)?;
        analytic.push(ids.iter().map(|&id| tape.grad_or_zero(id)).collect());
    }

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut reports = vec![GradCheckReport { max_rel_error: 0.0, worst: (0, 0), coords: 0 }; outs.len()];
    let two_h = h + h;
    for pi in 0..params.len() {
        for j in 0..params[pi].numel() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            for (o, report) in reports.iter_mut().enumerate() {
                let fd = (up[o] - down[o]) / two_h;
                let ad = analytic[o][pi][j];
                let err = ((fd - ad).abs() / ad.abs().max(T::one())).to_f64_lossy();
                report.coords += 1;
                if err > report.max_rel_error || err.is_nan() {
                    report.max_rel_error = err;
                    report.worst = (pi, j);
                }
            }
        }
    }
    Ok(reports)
}
