//! Feature-contrastive training library.
//!
//! Everything needed to run the corner-digit robustness experiment lives here:
//! a small reverse-mode autodiff engine over dense f64 tensors, an
//! embedding/head classifier, per-feature utility and sensitivity attribution,
//! utility-aware perturbations, the contrastive losses, the training loop with
//! its method registry, the synthetic dataset generator with its noise
//! injectors, and the evaluation metrics.

pub mod attribution;
pub mod dataset;
pub mod engine;
pub mod evaluation;
pub mod losses;
pub mod methods;
pub mod perturbation;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use engine::{EngineError, Gradients, NodeId, Tape};
pub use tensor::Tensor;
