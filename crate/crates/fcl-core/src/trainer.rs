//! The training loop: deterministic per-epoch shuffling, warm-up scheduling
//! of the auxiliary-loss weight, optional patch-Gaussian input augmentation,
//! method dispatch through the strategy registry, optimizer stepping, and
//! per-epoch logging.

use crate::attribution::AttributionError;
use crate::dataset::{ImageDataset, IMG_SIDE};
use crate::engine::EngineError;
use crate::evaluation::{self, EvalError};
use crate::losses::{self, LossError};
use crate::methods::{self, MethodKind, StepState, TrainingMethod};
use crate::model::{self, ModelError, ModelSpec, Parameters};
use crate::optim::{OptimError, Optimizer, OptimizerConfig};
use crate::perturbation::{self, PerturbationError, PerturbationSpec};
use crate::rng::{self, purpose};
use crate::{Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub const DEFAULT_DROP_THRESHOLD: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: u32, step: u64, detail: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// A non-finite value surfacing anywhere in a step means the run diverged;
/// everything else is a caller error and passes through unchanged.
fn non_finite_detail(e: &TrainError) -> Option<String> {
    fn engine(e: &EngineError) -> Option<String> {
        matches!(e, EngineError::NonFinite { .. }).then(|| e.to_string())
    }
    match e {
        TrainError::Engine(en) => engine(en),
        TrainError::Loss(LossError::Engine(en)) => engine(en),
        TrainError::Model(ModelError::Engine(en)) => engine(en),
        TrainError::Attribution(AttributionError::Engine(en)) => engine(en),
        TrainError::Attribution(AttributionError::Model(ModelError::Engine(en))) => engine(en),
        TrainError::Attribution(AttributionError::Loss(LossError::Engine(en))) => engine(en),
        _ => None,
    }
}

/// Input augmentation applied before the forward pass, for any method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, tag = "mode")]
pub enum AugmentKind {
    #[default]
    None,
    #[serde(rename_all = "kebab-case")]
    PatchGaussian { patch_size: usize, sigma: f64 },
}

/// Warm-up for the auxiliary-loss weight: zero before `on_epoch`, then a
/// linear ramp over `ramp_epochs` up to the configured weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub on_epoch: u32,
    pub ramp_epochs: u32,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig { on_epoch: 2, ramp_epochs: 2 }
    }
}

/// Auxiliary-loss weight at a (fractional) epoch position. Exactly zero
/// before the warm-up epoch; a zero ramp switches the full weight on at the
/// warm-up epoch.
pub fn lambda_schedule(epoch: f64, warmup: &WarmupConfig, lambda: f64) -> f64 {
    let on = warmup.on_epoch as f64;
    if epoch < on {
        return 0.0;
    }
    if warmup.ramp_epochs == 0 {
        return lambda;
    }
    lambda * ((epoch - on) / warmup.ramp_epochs as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: MethodKind,
    pub augment: AugmentKind,
    /// Full weight of the auxiliary loss after warm-up.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Number of features in each top/bottom utility selection.
    pub k: usize,
    /// Noise standard deviation for pair construction and Gaussian baselines.
    pub sigma: f64,
    pub warmup: WarmupConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: MethodKind::Fcl,
            augment: AugmentKind::None,
            lambda: 0.001,
            tau: 0.1,
            k: 256,
            sigma: 0.5,
            warmup: WarmupConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 20,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks the knobs each method actually reads; `k`'s upper bound
    /// depends on the model input and is checked at training start.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Invalid("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Invalid("batch size must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(TrainError::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.optimizer.validate()?;
        let needs_sigma = !matches!(self.method, MethodKind::Xe);
        let needs_tau = matches!(self.method, MethodKind::ClGaussian | MethodKind::Fcl);
        if needs_sigma && !(self.sigma > 0.0) {
            return Err(TrainError::Invalid(format!(
                "method {} needs sigma > 0, got {}",
                self.method.as_str(),
                self.sigma
            )));
        }
        if needs_tau && !(self.tau > 0.0) {
            return Err(TrainError::Invalid(format!(
                "method {} needs tau > 0, got {}",
                self.method.as_str(),
                self.tau
            )));
        }
        if matches!(self.method, MethodKind::Fcl) && self.k == 0 {
            return Err(TrainError::Invalid("k must be positive for the fcl method".into()));
        }
        if let AugmentKind::PatchGaussian { patch_size, sigma } = &self.augment {
            if *patch_size == 0 {
                return Err(TrainError::Invalid("augmentation patch size must be positive".into()));
            }
            if !(*sigma > 0.0) {
                return Err(TrainError::Invalid(format!(
                    "augmentation sigma must be > 0, got {sigma}"
                )));
            }
        }
        Ok(())
    }
}

/// One completed epoch. `wall_time_s` is diagnostic only: it is excluded
/// from serialization and equality so equal-config runs compare equal.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EpochRecord {
    pub epoch: u32,
    pub mean_classification_loss: f64,
    pub mean_fcl_loss: f64,
    /// Auxiliary weight at the first step of the epoch.
    pub effective_lambda: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub dropped_negatives: u64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl PartialEq for EpochRecord {
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.mean_classification_loss == other.mean_classification_loss
            && self.mean_fcl_loss == other.mean_fcl_loss
            && self.effective_lambda == other.effective_lambda
            && self.train_accuracy == other.train_accuracy
            && self.val_accuracy == other.val_accuracy
            && self.dropped_negatives == other.dropped_negatives
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,classification-loss,fcl-loss,effective-lambda,\
             train-accuracy,val-accuracy,dropped-negatives\n",
        );
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch,
                r.mean_classification_loss,
                r.mean_fcl_loss,
                r.effective_lambda,
                r.train_accuracy,
                r.val_accuracy,
                r.dropped_negatives
            ));
        }
        out
    }
}

/// Trains a fresh model. Deterministic given the config: shuffle order and
/// every noise draw are fixed functions of (seed, epoch, step, example).
pub fn train(
    config: &TrainConfig,
    spec: &ModelSpec,
    train_set: &ImageDataset,
    val_set: &ImageDataset,
) -> Result<(Parameters, TrainLog), TrainError> {
    train_tuned(config, spec, train_set, val_set, DEFAULT_DROP_THRESHOLD)
}

/// [`train`] with an explicit vanished-utility threshold for the pair
/// builder (exposed for configs that override the default).
pub fn train_tuned(
    config: &TrainConfig,
    spec: &ModelSpec,
    train_set: &ImageDataset,
    val_set: &ImageDataset,
    drop_threshold: f64,
) -> Result<(Parameters, TrainLog), TrainError> {
    config.validate()?;
    spec.validate()?;
    if spec.classes != train_set.class_count() || spec.classes != val_set.class_count() {
        return Err(TrainError::Invalid(format!(
            "model has {} classes; train/val sets have {}/{}",
            spec.classes,
            train_set.class_count(),
            val_set.class_count()
        )));
    }
    let pspec =
        PerturbationSpec { k: config.k, sigma: config.sigma, drop_threshold };
    if matches!(config.method, MethodKind::Fcl) {
        pspec.validate(spec.input_len())?;
    }
    let method = methods::create(config.method.as_str())
        .ok_or_else(|| TrainError::Invalid(format!("unknown method {}", config.method.as_str())))?;

    let mut params = Parameters::init(spec, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer.clone(), &params)?;
    let mut log = TrainLog::default();

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);

    for epoch in 0..config.epochs {
        let epoch_start = std::time::Instant::now();
        optimizer.set_epoch(epoch);

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(config.seed, &[purpose::SHUFFLE, epoch as u64]));

        let mut cls_sum = 0.0;
        let mut aux_sum = 0.0;
        let mut dropped = 0u64;
        let mut correct = 0usize;

        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let step = step as u64;
            let epoch_pos = epoch as f64 + step as f64 / steps_per_epoch as f64;
            let lambda_eff = lambda_schedule(epoch_pos, &config.warmup, config.lambda);

            let outcome = run_step(
                config,
                spec,
                &method,
                &pspec,
                train_set,
                chunk,
                &mut params,
                &mut optimizer,
                lambda_eff,
                epoch,
                step,
            );
            match outcome {
                Ok(s) => {
                    cls_sum += s.cls_sum;
                    aux_sum += s.aux_sum;
                    dropped += s.dropped as u64;
                    correct += s.correct;
                }
                Err(e) => {
                    return Err(match non_finite_detail(&e) {
                        Some(detail) => TrainError::Diverged { epoch, step, detail },
                        None => e,
                    });
                }
            }
        }

        let val = evaluation::accuracy(spec, &params, val_set, "val")?;
        log.epochs.push(EpochRecord {
            epoch,
            mean_classification_loss: cls_sum / n as f64,
            mean_fcl_loss: aux_sum / n as f64,
            effective_lambda: lambda_schedule(epoch as f64, &config.warmup, config.lambda),
            train_accuracy: correct as f64 / n as f64,
            val_accuracy: val.accuracy,
            dropped_negatives: dropped,
            wall_time_s: epoch_start.elapsed().as_secs_f64(),
        });
    }

    Ok((params, log))
}

struct StepOutcome {
    cls_sum: f64,
    aux_sum: f64,
    dropped: usize,
    correct: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    config: &TrainConfig,
    spec: &ModelSpec,
    method: &Box<dyn TrainingMethod>,
    pspec: &PerturbationSpec,
    train_set: &ImageDataset,
    chunk: &[usize],
    params: &mut Parameters,
    optimizer: &mut Optimizer,
    lambda_eff: f64,
    epoch: u32,
    step: u64,
) -> Result<StepOutcome, TrainError> {
    let example_ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
    let labels: Vec<usize> = chunk.iter().map(|&i| train_set.label(i)).collect();
    let mut images = Vec::with_capacity(chunk.len());
    for (j, &i) in chunk.iter().enumerate() {
        let x = train_set.image_tensor(i);
        images.push(match &config.augment {
            AugmentKind::None => x,
            AugmentKind::PatchGaussian { patch_size, sigma } => {
                let mut rng = rng::stream(
                    config.seed,
                    &[purpose::AUGMENT, epoch as u64, step, example_ids[j]],
                );
                let shaped = Tensor::new(vec![IMG_SIDE, IMG_SIDE], x.into_data())?;
                let noised = perturbation::patch_gaussian(&shaped, *patch_size, *sigma, &mut rng)?;
                Tensor::vector(noised.into_data())
            }
        });
    }

    let mut tape = Tape::new();
    let pn = model::bind_params(&mut tape, params);
    let mut anchors = Vec::with_capacity(images.len());
    let mut items = Vec::with_capacity(images.len());
    let mut correct = 0usize;
    for (x, &label) in images.iter().zip(&labels) {
        let xid = tape.leaf(x.clone());
        let z = model::forward_embed(&mut tape, spec, &pn, xid)?;
        let logits = model::apply_head(&mut tape, &pn, z)?;
        if tape.value(logits).argmax() == label {
            correct += 1;
        }
        anchors.push(z);
        items.push((logits, label));
    }
    let cls = losses::cross_entropy_mean(&mut tape, &items)?;
    let cls_value = tape.value(cls).data()[0];

    let mut state = StepState {
        tape: &mut tape,
        spec,
        pn: &pn,
        params,
        images: &images,
        labels: &labels,
        example_ids: &example_ids,
        anchors: &anchors,
        lambda_eff,
        tau: config.tau,
        sigma: config.sigma,
        perturbation: pspec,
        seed: config.seed,
        epoch,
        step,
    };
    let aux = method.auxiliary_loss(&mut state)?;

    let total = losses::total_loss(&mut tape, cls, aux.node, lambda_eff)?;
    let node_ids = pn.node_ids();
    let grads = tape.gradient(total, &node_ids)?;
    let grad_tensors: Vec<Tensor> =
        node_ids.iter().map(|&id| grads.or_zeros(&tape, id)).collect();
    optimizer.step(params, &grad_tensors)?;

    Ok(StepOutcome {
        cls_sum: cls_value * images.len() as f64,
        aux_sum: aux.value_sum,
        dropped: aux.dropped,
        correct,
    })
}
