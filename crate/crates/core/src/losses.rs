//! Prediction, concept and domain losses, the threshold-capped domain loss,
//! and the encoder/predictor objective. All values are in nats.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};
use crate::Scalar;

/// Scalar values of one training step's losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBundle {
    pub l_p: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub l_d_relaxed: f64,
    pub encoder_objective: f64,
    pub tau: f64,
}

/// Cross-entropy of predicted class logits against one-hot source labels.
pub fn prediction_loss<T: Scalar>(tape: &mut Tape<T>, logits: NodeId, y_onehot: &[T]) -> Result<NodeId> {
    tape.softmax_cross_entropy(logits, y_onehot)
}

/// Binary cross-entropy averaged over batch and concepts.
pub fn concept_loss<T: Scalar>(tape: &mut Tape<T>, c_hat: NodeId, c: &[T]) -> Result<NodeId> {
    tape.binary_cross_entropy(c_hat, c)
}

/// Domain BCE with `u = 0` on source rows and `u = 1` on target rows,
/// averaged over all rows.
pub fn discriminator_loss<T: Scalar>(tape: &mut Tape<T>, p_source: NodeId, p_target: NodeId) -> Result<NodeId> {
    let (ns, nt) = (tape.value(p_source).len(), tape.value(p_target).len());
    let ps = tape.reshape(p_source, &[ns])?;
    let pt = tape.reshape(p_target, &[nt])?;
    let all = tape.concat(&[ps, pt])?;
    let mut u = vec![T::zero(); ns];
    u.resize(ns + nt, T::one());
    tape.binary_cross_entropy(all, &u)
}

/// `min(l_d, τ)` on the batch-level loss.
pub fn relaxed_discriminator_loss<T: Scalar>(tape: &mut Tape<T>, l_d: NodeId, tau: T) -> Result<NodeId> {
    if !(tau > T::zero()) {
        return Err(Error::Config(format!("relaxation threshold must be positive, got {tau}")));
    }
    tape.min_const(l_d, tau)
}

/// `l_p + λ_c·l_c − λ_d·l̃_d`.
pub fn encoder_objective<T: Scalar>(
    tape: &mut Tape<T>,
    l_p: NodeId,
    l_c: NodeId,
    l_d_relaxed: NodeId,
    lambda_c: T,
    lambda_d: T,
) -> Result<NodeId> {
    let wc = tape.scale(l_c, lambda_c);
    let wd = tape.scale(l_d_relaxed, lambda_d);
    let sup = tape.add(l_p, wc)?;
    tape.sub(sup, wd)
}
