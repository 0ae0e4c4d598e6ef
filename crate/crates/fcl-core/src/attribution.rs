//! Per-feature attribution signals: utility (how much each input feature
//! moves the classification loss) and sensitivity (how much it moves the
//! embedding), in gradient-based and removal-based forms, plus the
//! inverse-probability decomposition of utility used as a cross-check.

use crate::engine::EngineError;
use crate::losses::{self, LossError};
use crate::model::{self, ModelError, ModelSpec, Parameters};
use crate::tensor::Tensor;
use crate::Tape;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum AttributionError {
    #[error("invalid attribution input: {0}")]
    Invalid(String),
    #[error("predicted class probability underflowed ({0:e}); utility decomposition undefined")]
    ProbabilityUnderflow(f64),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Per-feature loss attribution for one example; entries are nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityVector {
    pub values: Tensor,
    pub example_index: usize,
}

/// Per-feature embedding attribution; entries are nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityVector {
    pub values: Tensor,
}

/// How "feature j removed" is realized on a dense input vector. Removing a
/// feature changes that coordinate only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RemovalRule {
    /// Replace with 0 — "absent ink" in the pixel domain. The default.
    ZeroBaseline,
    /// Replace with a per-feature baseline (e.g. dataset feature means).
    MeanBaseline { baseline: Vec<f64> },
    /// Replace with one fixed sentinel value.
    MaskToken { value: f64 },
}

impl Default for RemovalRule {
    fn default() -> Self {
        RemovalRule::ZeroBaseline
    }
}

impl RemovalRule {
    /// The input with feature `j` removed, or `None` when removal would not
    /// change it (so downstream attribution is exactly zero).
    pub fn remove(&self, x: &Tensor, j: usize) -> Result<Option<Tensor>, AttributionError> {
        let d = x.len();
        if j >= d {
            return Err(AttributionError::Invalid(format!("feature {j} out of range for {d}")));
        }
        let replacement = match self {
            RemovalRule::ZeroBaseline => 0.0,
            RemovalRule::MeanBaseline { baseline } => {
                if baseline.len() != d {
                    return Err(AttributionError::Invalid(format!(
                        "baseline has {} entries for {d} features",
                        baseline.len()
                    )));
                }
                baseline[j]
            }
            RemovalRule::MaskToken { value } => *value,
        };
        if x.data()[j] == replacement {
            return Ok(None);
        }
        let mut out = x.clone();
        out.data_mut()[j] = replacement;
        Ok(Some(out))
    }
}

/// u_j = |∂ℓ/∂x_j| for the classification loss alone (the contrastive term
/// never enters the utility signal).
pub fn utility_continuous(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    label: usize,
) -> Result<UtilityVector, AttributionError> {
    let mut out = utility_continuous_batch(spec, params, &[x.clone()], &[label])?;
    Ok(out.pop().unwrap())
}

/// Batch form: one tape, one backward pass over the *sum* of per-example
/// losses. The sum's gradient reaching each example's input is exactly that
/// example's own loss gradient (no 1/n scaling), so results are bitwise
/// identical to the one-example call.
pub fn utility_continuous_batch(
    spec: &ModelSpec,
    params: &Parameters,
    xs: &[Tensor],
    labels: &[usize],
) -> Result<Vec<UtilityVector>, AttributionError> {
    if xs.is_empty() || xs.len() != labels.len() {
        return Err(AttributionError::Invalid(format!(
            "{} inputs vs {} labels",
            xs.len(),
            labels.len()
        )));
    }
    let mut tape = Tape::new();
    let pn = model::bind_params(&mut tape, params);
    let mut input_ids = Vec::with_capacity(xs.len());
    let mut loss_ids = Vec::with_capacity(xs.len());
    for (x, &label) in xs.iter().zip(labels) {
        let xid = tape.leaf(x.clone());
        let logits = model::forward_logits(&mut tape, spec, &pn, xid)?;
        loss_ids.push(losses::cross_entropy(&mut tape, logits, label)?);
        input_ids.push(xid);
    }
    let total = losses::sum_scalars(&mut tape, &loss_ids)?;
    let grads = tape.gradient(total, &input_ids)?;
    let mut out = Vec::with_capacity(xs.len());
    for (i, &xid) in input_ids.iter().enumerate() {
        let mut g = grads.or_zeros(&tape, xid);
        g.data_mut().iter_mut().for_each(|v| *v = v.abs());
        out.push(UtilityVector { values: g, example_index: i });
    }
    Ok(out)
}

/// u_j = |ℓ(x) − ℓ(x with feature j removed)| via D+1 forward passes.
pub fn utility_discrete(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    label: usize,
    rule: &RemovalRule,
) -> Result<UtilityVector, AttributionError> {
    let base = loss_value(spec, params, x, label)?;
    let d = x.len();
    let mut values = vec![0.0; d];
    for j in 0..d {
        if let Some(removed) = rule.remove(x, j)? {
            values[j] = (base - loss_value(spec, params, &removed, label)?).abs();
        }
    }
    Ok(UtilityVector { values: Tensor::new(vec![d], values).unwrap(), example_index: 0 })
}

/// s_j = ‖∂φ/∂x_j‖₂, the Euclidean norm of column j of the embedding
/// jacobian. Depends only on the embedding parameters, never the head.
pub fn sensitivity_continuous(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
) -> Result<SensitivityVector, AttributionError> {
    let mut tape = Tape::new();
    let pn = model::bind_params(&mut tape, params);
    let xid = tape.leaf(x.clone());
    let z = model::forward_embed(&mut tape, spec, &pn, xid)?;
    let jac = tape.jacobian(z, xid)?;
    let (e, d) = (jac.dims()[0], jac.dims()[1]);
    let mut values = vec![0.0; d];
    for j in 0..d {
        let mut sq = 0.0;
        for row in 0..e {
            let v = jac.data()[row * d + j];
            sq += v * v;
        }
        values[j] = sq.sqrt();
    }
    Ok(SensitivityVector { values: Tensor::new(vec![d], values).unwrap() })
}

/// s_j = ‖φ(x) − φ(x with feature j removed)‖₂ via D+1 forward passes.
pub fn sensitivity_discrete(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    rule: &RemovalRule,
) -> Result<SensitivityVector, AttributionError> {
    let base = embed_value(spec, params, x)?;
    let d = x.len();
    let mut values = vec![0.0; d];
    for j in 0..d {
        if let Some(removed) = rule.remove(x, j)? {
            let z = embed_value(spec, params, &removed)?;
            let sq: f64 = base
                .data()
                .iter()
                .zip(z.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            values[j] = sq.sqrt();
        }
    }
    Ok(SensitivityVector { values: Tensor::new(vec![d], values).unwrap() })
}

/// Splits utility into (1 / p_label, |∂p_label/∂x|): the elementwise product
/// of the parts reconstructs `utility_continuous`. Errors when the predicted
/// probability underflows below 1e-300.
pub fn utility_decomposition(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    label: usize,
) -> Result<(f64, Tensor), AttributionError> {
    let mut tape = Tape::new();
    let pn = model::bind_params(&mut tape, params);
    let xid = tape.leaf(x.clone());
    let logits = model::forward_logits(&mut tape, spec, &pn, xid)?;

    let classes = tape.value(logits).len();
    if label >= classes {
        return Err(AttributionError::Invalid(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    // p_label as a graph: softmax with a detached max shift, the reciprocal
    // of the normalizer expressed as exp(−log Σ).
    let m = tape.value(logits).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(logits, -m)?;
    let exps = tape.exp(shifted)?;
    let total = tape.sum(exps)?;
    let log_total = tape.log(total)?;
    let neg_log_total = tape.scale(log_total, -1.0)?;
    let inv_total = tape.exp(neg_log_total)?;
    let hot = tape.leaf(Tensor::one_hot(classes, label));
    let picked = tape.dot(exps, hot)?;
    let prob = tape.mul(picked, inv_total)?;

    let p = tape.value(prob).item();
    if p < 1e-300 {
        return Err(AttributionError::ProbabilityUnderflow(p));
    }
    let grads = tape.gradient(prob, &[xid])?;
    let mut g = grads.or_zeros(&tape, xid);
    g.data_mut().iter_mut().for_each(|v| *v = v.abs());
    Ok((1.0 / p, g))
}

fn loss_value(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    label: usize,
) -> Result<f64, AttributionError> {
    let mut tape = Tape::new();
    let pn = model::bind_params(&mut tape, params);
    let xid = tape.leaf(x.clone());
    let logits = model::forward_logits(&mut tape, spec, &pn, xid)?;
    let loss = losses::cross_entropy(&mut tape, logits, label)?;
    Ok(tape.value(loss).item())
}

fn embed_value(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
) -> Result<Tensor, AttributionError> {
    let mut tape = Tape::new();
    let pn = model::bind_params(&mut tape, params);
    let xid = tape.leaf(x.clone());
    let z = model::forward_embed(&mut tape, spec, &pn, xid)?;
    Ok(tape.value(z).clone())
}
