use std::fmt::Write as _;

use serde::Serialize;

use super::{ideal_embeddings, probe_jsd, ProbeConfig, ProbeEstimate};
use crate::datagen::Dataset;
use crate::error::Result;
use crate::model::{argmax_rows, ModelParams};
use crate::tensor::Tensor;
use crate::Scalar;

/// Empirical proxies for the terms of the target-error bound.
///
/// The labelling-function discrepancy and the Rademacher term have no
/// finite-sample estimate here and are reported as not computable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundAudit {
    /// Observed target error of the predictor on predicted concepts.
    pub target_error: f64,
    /// Source error when the predictor reads ground-truth-weighted embeddings.
    pub source_ideal_error: f64,
    /// Mean over source examples of `‖ĉ − c‖₂`.
    pub concept_term: f64,
    /// Probe estimate of JSD between ideal source and predicted target embeddings.
    pub divergence: ProbeEstimate,
    pub labelling_discrepancy: Option<f64>,
    pub rademacher: Option<f64>,
}

impl BoundAudit {
    /// Sum of the computable right-hand-side terms.
    pub fn computable_rhs(&self) -> f64 {
        self.source_ideal_error + self.concept_term + self.divergence.jsd
    }

    pub fn to_csv_string(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "not computable".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("term,value\n");
        let _ = writeln!(s, "target_error,{:.6}", self.target_error);
        let _ = writeln!(s, "source_ideal_error,{:.6}", self.source_ideal_error);
        let _ = writeln!(s, "concept_term,{:.6}", self.concept_term);
        let _ = writeln!(s, "divergence_jsd,{:.6}", self.divergence.jsd);
        let _ = writeln!(s, "computable_rhs,{:.6}", self.computable_rhs());
        let _ = writeln!(s, "labelling_discrepancy,{}", fmt(self.labelling_discrepancy));
        let _ = writeln!(s, "rademacher,{}", fmt(self.rademacher));
        s
    }
}

fn rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let (r, _) = t.as_matrix();
    (0..r).map(|i| t.row(i).iter().map(|v| v.to_f64_lossy()).collect()).collect()
}

pub fn bound_audit<T: Scalar>(params: &ModelParams<T>, source: &Dataset, target: &Dataset, probe: &ProbeConfig) -> Result<BoundAudit> {
    let target_error = 1.0 - super::evaluate(params, target)?.class_acc;
    let v_ideal = ideal_embeddings(params, source)?;
    let pred = argmax_rows(&params.logits_for(&v_ideal)?);
    let wrong = pred.iter().zip(&source.examples).filter(|(p, e)| **p != e.y).count();
    let source_ideal_error = wrong as f64 / source.len() as f64;

    let src = params.infer(&source.x_tensor::<T>(&source.all_indices()))?;
    let probs: Vec<f64> = src.c_hat.data().iter().map(|v| v.to_f64_lossy()).collect();
    let truth: Vec<u8> = source.examples.iter().flat_map(|e| e.c.iter().copied()).collect();
    let concept_term = super::concept_error_term(&probs, &truth, params.config.n_concepts);

    let tgt = params.infer(&target.x_tensor::<T>(&target.all_indices()))?;
    let divergence = probe_jsd(&rows(&v_ideal), &rows(&tgt.v), probe)?;
    Ok(BoundAudit {
        target_error,
        source_ideal_error,
        concept_term,
        divergence,
        labelling_discrepancy: None,
        rademacher: None,
    })
}
