//! Losses built on tape nodes: stabilized softmax cross-entropy, the
//! cosine contrastive loss over anchor/positive/hard-negative batches, the
//! squared-distance margin variant, and the weighted total.

use crate::engine::{EngineError, NodeId, Tape};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Norms below this are treated as zero; cosine similarity is undefined there.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("zero-norm embedding: cosine similarity undefined")]
    ZeroNorm,
    #[error("invalid loss input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Contrastive-loss knobs. `gamma` only affects the margin variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.1, gamma: 1.0, lambda: 0.001 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0) {
            return Err(LossError::Invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.gamma > 0.0) {
            return Err(LossError::Invalid(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0) {
            return Err(LossError::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// One training batch of embeddings for the contrastive loss. Per example:
/// the anchor z_i, its positive z_i⁺, and optionally a hard negative z_i⁻
/// (absent when the utility signal vanished and the negative was dropped).
/// The full negative set for example i is its own hard negative plus every
/// other example's anchor.
pub struct ContrastiveBatch {
    pub anchors: Vec<NodeId>,
    pub positives: Vec<NodeId>,
    pub hard_negatives: Vec<Option<NodeId>>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn validate(&self) -> Result<(), LossError> {
        if self.anchors.is_empty() {
            return Err(LossError::Invalid("empty contrastive batch".into()));
        }
        if self.positives.len() != self.anchors.len() || self.hard_negatives.len() != self.anchors.len() {
            return Err(LossError::Invalid(format!(
                "batch fields disagree: {} anchors, {} positives, {} negatives",
                self.anchors.len(),
                self.positives.len(),
                self.hard_negatives.len()
            )));
        }
        Ok(())
    }
}

/// −log softmax(logits)[label], stabilized by subtracting the running max of
/// the logit values before exponentiation (the shift cancels analytically).
pub fn cross_entropy(tape: &mut Tape, logits: NodeId, label: usize) -> Result<NodeId, LossError> {
    let values = tape.value(logits);
    let classes = values.len();
    if values.rank() != 1 || classes == 0 {
        return Err(LossError::Invalid(format!("logits must be a non-empty vector, got {:?}", values.dims())));
    }
    if label >= classes {
        return Err(LossError::Invalid(format!("label {label} out of range for {classes} classes")));
    }
    let m = values.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(logits, -m)?;
    let exps = tape.exp(shifted)?;
    let total = tape.sum(exps)?;
    let log_total = tape.log(total)?;
    let hot = tape.leaf(Tensor::one_hot(classes, label));
    let picked = tape.dot(shifted, hot)?;
    Ok(tape.sub(log_total, picked)?)
}

/// Mean cross-entropy over a batch of (logits node, label) pairs.
pub fn cross_entropy_mean(
    tape: &mut Tape,
    items: &[(NodeId, usize)],
) -> Result<NodeId, LossError> {
    if items.is_empty() {
        return Err(LossError::Invalid("empty batch".into()));
    }
    let mut terms = Vec::with_capacity(items.len());
    for &(logits, label) in items {
        terms.push(cross_entropy(tape, logits, label)?);
    }
    let total = sum_scalars(tape, &terms)?;
    Ok(tape.scale(total, 1.0 / items.len() as f64)?)
}

/// Folds scalar nodes into their sum.
pub fn sum_scalars(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId, LossError> {
    let mut iter = nodes.iter();
    let Some(&first) = iter.next() else {
        return Err(LossError::Invalid("no terms to sum".into()));
    };
    let mut acc = first;
    for &n in iter {
        acc = tape.add(acc, n)?;
    }
    Ok(acc)
}

/// z / ‖z‖ as a differentiable graph; the reciprocal is exp(−log ‖z‖).
pub fn normalize(tape: &mut Tape, z: NodeId) -> Result<NodeId, LossError> {
    let n = tape.norm(z)?;
    if tape.value(n).item() < NORM_FLOOR {
        return Err(LossError::ZeroNorm);
    }
    let log_n = tape.log(n)?;
    let neg_log = tape.scale(log_n, -1.0)?;
    let inv = tape.exp(neg_log)?;
    Ok(tape.mul(z, inv)?)
}

/// aᵀb / (‖a‖‖b‖). Errors on a zero-norm input.
pub fn cosine_similarity(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId, LossError> {
    let ah = normalize(tape, a)?;
    let bh = normalize(tape, b)?;
    Ok(tape.dot(ah, bh)?)
}

/// Contrastive loss summed over the batch. Per example i the term is
/// −log( e^{s⁺/τ} / (e^{s⁺/τ} + Σ_neg e^{s/τ}) ) where s are cosine
/// similarities against the anchor; negatives are the example's own hard
/// negative (if present) plus all other anchors. With no negatives at all
/// the term is exactly 0. Stabilized per example by a detached max shift.
pub fn fcl_loss(tape: &mut Tape, batch: &ContrastiveBatch, tau: f64) -> Result<NodeId, LossError> {
    batch.validate()?;
    if !(tau > 0.0) {
        return Err(LossError::Invalid(format!("tau must be > 0, got {tau}")));
    }
    let n = batch.len();
    let anchors_hat: Vec<NodeId> =
        batch.anchors.iter().map(|&z| normalize(tape, z)).collect::<Result<_, _>>()?;
    let positives_hat: Vec<NodeId> =
        batch.positives.iter().map(|&z| normalize(tape, z)).collect::<Result<_, _>>()?;
    let negatives_hat: Vec<Option<NodeId>> = batch
        .hard_negatives
        .iter()
        .map(|z| z.map(|z| normalize(tape, z)).transpose())
        .collect::<Result<_, _>>()?;

    let inv_tau = 1.0 / tau;
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let pos_dot = tape.dot(anchors_hat[i], positives_hat[i])?;
        let s_pos = tape.scale(pos_dot, inv_tau)?;
        let mut s_negs = Vec::new();
        if let Some(neg) = negatives_hat[i] {
            let d = tape.dot(anchors_hat[i], neg)?;
            s_negs.push(tape.scale(d, inv_tau)?);
        }
        for (j, &other) in anchors_hat.iter().enumerate() {
            if j != i {
                let d = tape.dot(anchors_hat[i], other)?;
                s_negs.push(tape.scale(d, inv_tau)?);
            }
        }

        let m = std::iter::once(s_pos)
            .chain(s_negs.iter().copied())
            .map(|id| tape.value(id).item())
            .fold(f64::NEG_INFINITY, f64::max);

        let pos_shifted = tape.add_scalar(s_pos, -m)?;
        let mut denom_parts = Vec::with_capacity(1 + s_negs.len());
        denom_parts.push(tape.exp(pos_shifted)?);
        for &s in &s_negs {
            let shifted = tape.add_scalar(s, -m)?;
            denom_parts.push(tape.exp(shifted)?);
        }
        let denom = sum_scalars(tape, &denom_parts)?;
        let log_denom = tape.log(denom)?;
        terms.push(tape.sub(log_denom, pos_shifted)?);
    }
    sum_scalars(tape, &terms)
}

/// Squared-distance margin objective for one triple:
/// ‖z − z⁺‖² + max(0, γ − ‖z − z⁻‖)².
pub fn margin_loss(
    tape: &mut Tape,
    z: NodeId,
    z_plus: NodeId,
    z_minus: NodeId,
    gamma: f64,
) -> Result<NodeId, LossError> {
    if !(gamma > 0.0) {
        return Err(LossError::Invalid(format!("gamma must be > 0, got {gamma}")));
    }
    let diff_plus = tape.sub(z, z_plus)?;
    let dist_plus = tape.norm(diff_plus)?;
    let pull = tape.mul(dist_plus, dist_plus)?;

    let diff_minus = tape.sub(z, z_minus)?;
    let dist_minus = tape.norm(diff_minus)?;
    let neg_dist = tape.scale(dist_minus, -1.0)?;
    let gap = tape.add_scalar(neg_dist, gamma)?;
    let hinge = tape.relu(gap)?;
    let push = tape.mul(hinge, hinge)?;
    Ok(tape.add(pull, push)?)
}

/// ℓ_total = xent + λ_eff · fcl. When λ_eff is zero or there is no
/// contrastive term, the classification node is returned unchanged so the
/// graph — and every downstream bit — is identical to plain cross-entropy.
pub fn total_loss(
    tape: &mut Tape,
    xent: NodeId,
    fcl: Option<NodeId>,
    lambda_eff: f64,
) -> Result<NodeId, LossError> {
    if !(lambda_eff >= 0.0) {
        return Err(LossError::Invalid(format!("lambda must be >= 0, got {lambda_eff}")));
    }
    match fcl {
        Some(f) if lambda_eff != 0.0 => {
            let weighted = tape.scale(f, lambda_eff)?;
            Ok(tape.add(xent, weighted)?)
        }
        _ => Ok(xent),
    }
}
