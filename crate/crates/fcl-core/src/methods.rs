//! Training-method strategies. Each method contributes an optional
//! auxiliary loss node recorded on the step's main tape; the trainer adds
//! it to the classification loss with the warm-up-scheduled weight. New
//! methods register by name in [`REGISTRY`] and are selected at runtime.

use crate::attribution;
use crate::losses::{self, ContrastiveBatch};
use crate::model::{self, ModelSpec, ParamNodes, Parameters};
use crate::perturbation::{self, PerturbationSpec};
use crate::rng::{self, purpose};
use crate::trainer::TrainError;
use crate::{NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};

/// Everything one method invocation may read or record during a step.
/// `anchors` are the embeddings φ(x) already recorded by the trainer's
/// classification pass, so methods can reuse them without a second forward.
pub struct StepState<'a> {
    pub tape: &'a mut Tape,
    pub spec: &'a ModelSpec,
    pub pn: &'a ParamNodes,
    pub params: &'a Parameters,
    pub images: &'a [Tensor],
    pub labels: &'a [usize],
    pub example_ids: &'a [u64],
    pub anchors: &'a [NodeId],
    pub lambda_eff: f64,
    pub tau: f64,
    pub sigma: f64,
    pub perturbation: &'a PerturbationSpec,
    pub seed: u64,
    pub epoch: u32,
    pub step: u64,
}

impl StepState<'_> {
    /// Per-example noise stream: a fixed function of (seed, epoch, step,
    /// example id) so runs with equal configs replay identical draws.
    fn noise_rng(&self, example_index: usize) -> rand_chacha::ChaCha8Rng {
        rng::stream(
            self.seed,
            &[purpose::PERTURB, self.epoch as u64, self.step, self.example_ids[example_index]],
        )
    }
}

/// What a method produced for one step. `value_sum` is the auxiliary loss
/// summed over the examples of the step (so the epoch log can report a
/// per-example mean); `dropped` counts examples whose own negative was
/// withheld because their utility signal vanished.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Auxiliary {
    pub node: Option<NodeId>,
    pub value_sum: f64,
    pub dropped: usize,
}

impl Auxiliary {
    pub fn none() -> Self {
        Auxiliary { node: None, value_sum: 0.0, dropped: 0 }
    }
}

pub trait TrainingMethod {
    fn name(&self) -> &'static str;
    fn auxiliary_loss(&self, s: &mut StepState) -> Result<Auxiliary, TrainError>;
}

/// Plain cross-entropy: no auxiliary term.
pub struct Xe;

impl TrainingMethod for Xe {
    fn name(&self) -> &'static str {
        "xe"
    }

    fn auxiliary_loss(&self, _s: &mut StepState) -> Result<Auxiliary, TrainError> {
        Ok(Auxiliary::none())
    }
}

/// Cross-entropy on a dense-Gaussian-noised copy of each input, added as a
/// weighted second classification term.
pub struct XeGaussian;

impl TrainingMethod for XeGaussian {
    fn name(&self) -> &'static str {
        "xe-gaussian"
    }

    fn auxiliary_loss(&self, s: &mut StepState) -> Result<Auxiliary, TrainError> {
        if s.lambda_eff == 0.0 {
            return Ok(Auxiliary::none());
        }
        let mut items = Vec::with_capacity(s.images.len());
        for (i, x) in s.images.iter().enumerate() {
            let mut rng = s.noise_rng(i);
            let noisy = perturbation::gaussian_full(x, s.sigma, &mut rng)?;
            let xid = s.tape.leaf(noisy);
            let logits = model::forward_logits(s.tape, s.spec, s.pn, xid)?;
            items.push((logits, s.labels[i]));
        }
        let node = losses::cross_entropy_mean(s.tape, &items)?;
        let mean = s.tape.value(node).data()[0];
        Ok(Auxiliary { node: Some(node), value_sum: mean * s.images.len() as f64, dropped: 0 })
    }
}

/// Contrastive term whose positives are dense-Gaussian-noised copies of the
/// inputs; no utility-selected negatives (each anchor's negative set is just
/// the other anchors).
pub struct ClGaussian;

impl TrainingMethod for ClGaussian {
    fn name(&self) -> &'static str {
        "cl-gaussian"
    }

    fn auxiliary_loss(&self, s: &mut StepState) -> Result<Auxiliary, TrainError> {
        if s.lambda_eff == 0.0 {
            return Ok(Auxiliary::none());
        }
        let mut positives = Vec::with_capacity(s.images.len());
        for (i, x) in s.images.iter().enumerate() {
            let mut rng = s.noise_rng(i);
            let noisy = perturbation::gaussian_full(x, s.sigma, &mut rng)?;
            let xid = s.tape.leaf(noisy);
            positives.push(model::forward_embed(s.tape, s.spec, s.pn, xid)?);
        }
        let batch = ContrastiveBatch {
            anchors: s.anchors.to_vec(),
            positives,
            hard_negatives: vec![None; s.images.len()],
        };
        let node = losses::fcl_loss(s.tape, &batch, s.tau)?;
        let value_sum = s.tape.value(node).data()[0];
        Ok(Auxiliary { node: Some(node), value_sum, dropped: 0 })
    }
}

/// Feature-contrastive term: per-example utilities pick which features get
/// noised (bottom-k → positive, top-k → hard negative). The utility pass is
/// a separate read-only recording and runs even while the weight is zero, so
/// switching the weight on never changes the step's data pipeline.
pub struct Fcl;

impl TrainingMethod for Fcl {
    fn name(&self) -> &'static str {
        "fcl"
    }

    fn auxiliary_loss(&self, s: &mut StepState) -> Result<Auxiliary, TrainError> {
        let utilities =
            attribution::utility_continuous_batch(s.spec, s.params, s.images, s.labels)?;

        let mut pos_inputs = Vec::with_capacity(s.images.len());
        let mut neg_inputs = Vec::with_capacity(s.images.len());
        let mut dropped = 0usize;
        for (i, x) in s.images.iter().enumerate() {
            let mut rng = s.noise_rng(i);
            let (xp, xn) =
                perturbation::make_fcl_pair_inputs(x, &utilities[i], s.perturbation, &mut rng)?;
            if xn.is_none() {
                dropped += 1;
            }
            pos_inputs.push(xp);
            neg_inputs.push(xn);
        }

        if s.lambda_eff == 0.0 {
            // weight is zero: keep the term out of the recording entirely so
            // the update is exactly the plain classification update
            return Ok(Auxiliary { node: None, value_sum: 0.0, dropped });
        }

        let mut positives = Vec::with_capacity(pos_inputs.len());
        for xp in pos_inputs {
            let xid = s.tape.leaf(xp);
            positives.push(model::forward_embed(s.tape, s.spec, s.pn, xid)?);
        }
        let mut hard_negatives = Vec::with_capacity(neg_inputs.len());
        for xn in neg_inputs {
            hard_negatives.push(match xn {
                Some(t) => {
                    let xid = s.tape.leaf(t);
                    Some(model::forward_embed(s.tape, s.spec, s.pn, xid)?)
                }
                None => None,
            });
        }

        let batch = ContrastiveBatch { anchors: s.anchors.to_vec(), positives, hard_negatives };
        let node = losses::fcl_loss(s.tape, &batch, s.tau)?;
        let value_sum = s.tape.value(node).data()[0];
        Ok(Auxiliary { node: Some(node), value_sum, dropped })
    }
}

// ---------------------------------------------------------------------------
// Registry

fn make_xe() -> Box<dyn TrainingMethod> {
    Box::new(Xe)
}
fn make_xe_gaussian() -> Box<dyn TrainingMethod> {
    Box::new(XeGaussian)
}
fn make_cl_gaussian() -> Box<dyn TrainingMethod> {
    Box::new(ClGaussian)
}
fn make_fcl() -> Box<dyn TrainingMethod> {
    Box::new(Fcl)
}

/// Name → constructor table. Adding a method means adding one row here.
pub const REGISTRY: &[(&str, fn() -> Box<dyn TrainingMethod>)] = &[
    ("xe", make_xe),
    ("xe-gaussian", make_xe_gaussian),
    ("cl-gaussian", make_cl_gaussian),
    ("fcl", make_fcl),
];

/// Instantiates the method registered under `name`.
pub fn create(name: &str) -> Option<Box<dyn TrainingMethod>> {
    REGISTRY.iter().find(|(n, _)| *n == name).map(|(_, make)| make())
}

/// Registered method names, in registration order.
pub fn names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

/// Config-level method selector; `as_str` keys into the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Xe,
    XeGaussian,
    ClGaussian,
    #[default]
    Fcl,
}

impl MethodKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodKind::Xe => "xe",
            MethodKind::XeGaussian => "xe-gaussian",
            MethodKind::ClGaussian => "cl-gaussian",
            MethodKind::Fcl => "fcl",
        }
    }

    pub const ALL: [MethodKind; 4] =
        [MethodKind::Xe, MethodKind::XeGaussian, MethodKind::ClGaussian, MethodKind::Fcl];
}
