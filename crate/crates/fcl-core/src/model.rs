//! Classifiers as an embedding φ composed with a linear head h.
//!
//! A [`ModelSpec`] describes the layer chain; [`Parameters`] holds the named
//! weight tensors, partitioned by name prefix into the embedding part
//! (`phi.*`) and the head (`head.*`). The embedding output is the penultimate
//! activation; logits are pre-softmax (softmax lives inside the loss).

use crate::engine::{EngineError, NodeId, Tape};
use crate::rng::{self, purpose};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const CHECKPOINT_MAGIC: &[u8; 8] = b"FCLCKPT1";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Invalid(String),
    #[error("missing parameter tensor {0}")]
    MissingParam(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// One layer of the embedding chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize },
    Relu,
    MaxPool { window: usize },
    Flatten,
    Dense { out_features: usize },
}

/// Architecture description: input shape, embedding layers, and the class
/// count of the final dense head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Input tensor shape; rank 3 `[C,H,W]` for convolutional stacks, rank 1
    /// `[D]` for dense-only models.
    pub input: Vec<usize>,
    pub embedding: Vec<LayerSpec>,
    pub classes: usize,
}

impl ModelSpec {
    /// Default corner-digit architecture:
    /// conv(8,5×5) → relu → 2×2 pool → conv(16,5×5) → relu → 2×2 pool →
    /// flatten → dense(64) → relu, head dense(64 → 15). E = 64.
    pub fn lenet_corner_digits() -> Self {
        Self {
            input: vec![1, 28, 28],
            embedding: vec![
                LayerSpec::Conv { out_channels: 8, kernel: 5, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Conv { out_channels: 16, kernel: 5, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 64 },
                LayerSpec::Relu,
            ],
            classes: 15,
        }
    }

    /// Dense-only model: embedding is the identity over a length-`d` input,
    /// head maps straight to `classes` logits.
    pub fn linear_softmax(d: usize, classes: usize) -> Self {
        Self { input: vec![d], embedding: Vec::new(), classes }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    /// Shape after each embedding layer; index 0 is the input shape.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>, ModelError> {
        let mut shapes = vec![self.input.clone()];
        let mut current = self.input.clone();
        for (i, layer) in self.embedding.iter().enumerate() {
            current = match layer {
                LayerSpec::Conv { out_channels, kernel, stride } => {
                    if current.len() != 3 {
                        return Err(ModelError::Invalid(format!(
                            "layer {i}: conv needs [C,H,W] input, got {current:?}"
                        )));
                    }
                    if *stride == 0 || *kernel == 0 || *out_channels == 0 {
                        return Err(ModelError::Invalid(format!("layer {i}: conv sizes must be positive")));
                    }
                    let (h, w) = (current[1], current[2]);
                    if *kernel > h || *kernel > w {
                        return Err(ModelError::Invalid(format!(
                            "layer {i}: kernel {kernel} exceeds input {h}x{w}"
                        )));
                    }
                    vec![*out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                LayerSpec::Relu => current,
                LayerSpec::MaxPool { window } => {
                    if current.len() != 3 {
                        return Err(ModelError::Invalid(format!(
                            "layer {i}: maxpool needs [C,H,W] input, got {current:?}"
                        )));
                    }
                    if *window == 0 || current[1] / window == 0 || current[2] / window == 0 {
                        return Err(ModelError::Invalid(format!("layer {i}: window {window} too large")));
                    }
                    vec![current[0], current[1] / window, current[2] / window]
                }
                LayerSpec::Flatten => vec![current.iter().product()],
                LayerSpec::Dense { out_features } => {
                    if current.len() != 1 {
                        return Err(ModelError::Invalid(format!(
                            "layer {i}: dense needs a 1-D input (add flatten), got {current:?}"
                        )));
                    }
                    if *out_features == 0 {
                        return Err(ModelError::Invalid(format!("layer {i}: dense width must be positive")));
                    }
                    vec![*out_features]
                }
            };
            shapes.push(current.clone());
        }
        Ok(shapes)
    }

    /// Embedding dimension E. The embedding output must be 1-D.
    pub fn embed_dim(&self) -> Result<usize, ModelError> {
        let shapes = self.shape_chain()?;
        let last = shapes.last().unwrap();
        if last.len() != 1 {
            return Err(ModelError::Invalid(format!(
                "embedding must end 1-D before the head, got {last:?}"
            )));
        }
        Ok(last[0])
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.classes == 0 {
            return Err(ModelError::Invalid("class count must be positive".into()));
        }
        if self.input.is_empty() || self.input_len() == 0 {
            return Err(ModelError::Invalid("input shape must be non-empty".into()));
        }
        self.embed_dim()?;
        Ok(())
    }
}

/// Named parameter tensors in deterministic (creation) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    entries: Vec<(String, Tensor)>,
}

impl Parameters {
    /// Fan-in-scaled uniform init, U(−√(6/fan_in), √(6/fan_in)), matching a
    /// relu stack; biases exactly zero. Deterministic given the seed.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let shapes = spec.shape_chain()?;
        let mut r = rng::stream(seed, &[purpose::INIT]);
        let mut entries = Vec::new();

        for (i, layer) in spec.embedding.iter().enumerate() {
            match layer {
                LayerSpec::Conv { out_channels, kernel, .. } => {
                    let c_in = shapes[i][0];
                    let fan_in = c_in * kernel * kernel;
                    let weight = draw_uniform(&mut r, &[*out_channels, c_in, *kernel, *kernel], fan_in);
                    entries.push((format!("phi.{i}.weight"), weight));
                    entries.push((format!("phi.{i}.bias"), Tensor::zeros(&[*out_channels])));
                }
                LayerSpec::Dense { out_features } => {
                    let fan_in = shapes[i][0];
                    let weight = draw_uniform(&mut r, &[*out_features, fan_in], fan_in);
                    entries.push((format!("phi.{i}.weight"), weight));
                    entries.push((format!("phi.{i}.bias"), Tensor::zeros(&[*out_features])));
                }
                _ => {}
            }
        }
        let e_dim = spec.embed_dim()?;
        let head_weight = draw_uniform(&mut r, &[spec.classes, e_dim], e_dim);
        entries.push(("head.weight".into(), head_weight));
        entries.push(("head.bias".into(), Tensor::zeros(&[spec.classes])));
        Ok(Self { entries })
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Embedding-partition names (`phi.*`).
    pub fn phi_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str()).filter(|n| n.starts_with("phi."))
    }

    /// Head-partition names (`head.*`).
    pub fn head_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str()).filter(|n| n.starts_with("head."))
    }

    /// Writes the checkpoint container: magic, then per tensor a name-length
    /// u32, name bytes, rank u32, dims as u64, and little-endian f64 data.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for (name, tensor) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &d in tensor.dims() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let mut at = CHECKPOINT_MAGIC.len();
        let take = |at: &mut usize, n: usize| -> Result<&[u8], ModelError> {
            if *at + n > bytes.len() {
                return Err(ModelError::Corrupt(format!("truncated at byte {at}")));
            }
            let s = &bytes[*at..*at + n];
            *at += n;
            Ok(s)
        };
        let mut entries = Vec::new();
        while at < bytes.len() {
            let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
                .map_err(|_| ModelError::Corrupt("parameter name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize);
            }
            let volume: usize = dims.iter().product();
            let raw = take(&mut at, volume * 8)?;
            let data: Vec<f64> =
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let tensor = Tensor::new(dims, data).map_err(|e| ModelError::Corrupt(e.to_string()))?;
            entries.push((name, tensor));
        }
        Ok(Self { entries })
    }
}

fn draw_uniform(r: &mut impl Rng, dims: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let volume: usize = dims.iter().product();
    let data = (0..volume).map(|_| r.gen_range(-bound..bound)).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

/// Parameter tensors bound as leaves on a tape, shared across every example
/// recorded on that tape.
pub struct ParamNodes {
    ids: Vec<(String, NodeId)>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.ids.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    /// Node ids in parameter (creation) order.
    pub fn node_ids(&self) -> Vec<NodeId> {
        self.ids.iter().map(|(_, id)| *id).collect()
    }
}

/// Creates one leaf per parameter tensor.
pub fn bind_params(tape: &mut Tape, params: &Parameters) -> ParamNodes {
    let ids = params
        .entries()
        .iter()
        .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone())))
        .collect();
    ParamNodes { ids }
}

/// z = φ(x): runs the embedding chain. `x` may be the spec's input shape or
/// its flattened 1-D form.
pub fn forward_embed(
    tape: &mut Tape,
    spec: &ModelSpec,
    pn: &ParamNodes,
    x: NodeId,
) -> Result<NodeId, ModelError> {
    let expected = spec.input_len();
    let got = tape.value(x).len();
    if got != expected {
        return Err(ModelError::Invalid(format!("input has {got} values, spec wants {expected}")));
    }
    let mut h = if tape.value(x).dims() == spec.input.as_slice() {
        x
    } else {
        tape.reshape(x, spec.input.clone())?
    };
    for (i, layer) in spec.embedding.iter().enumerate() {
        h = match layer {
            LayerSpec::Conv { stride, .. } => {
                let w = param(pn, &format!("phi.{i}.weight"))?;
                let b = param(pn, &format!("phi.{i}.bias"))?;
                let c = tape.conv2d(h, w, *stride)?;
                tape.add(c, b)?
            }
            LayerSpec::Relu => tape.relu(h)?,
            LayerSpec::MaxPool { window } => tape.maxpool2d(h, *window)?,
            LayerSpec::Flatten => {
                let volume = tape.value(h).len();
                tape.reshape(h, vec![volume])?
            }
            LayerSpec::Dense { .. } => {
                let w = param(pn, &format!("phi.{i}.weight"))?;
                let b = param(pn, &format!("phi.{i}.bias"))?;
                let m = tape.matmul(w, h)?;
                tape.add(m, b)?
            }
        };
    }
    // dense-only identity embeddings may still be in the spec's input shape
    if tape.value(h).rank() != 1 {
        let volume = tape.value(h).len();
        h = tape.reshape(h, vec![volume])?;
    }
    Ok(h)
}

/// logits = h(z): the final dense head on an embedding node.
pub fn apply_head(tape: &mut Tape, pn: &ParamNodes, z: NodeId) -> Result<NodeId, ModelError> {
    let w = param(pn, "head.weight")?;
    let b = param(pn, "head.bias")?;
    let m = tape.matmul(w, z)?;
    Ok(tape.add(m, b)?)
}

/// logits = (h ∘ φ)(x).
pub fn forward_logits(
    tape: &mut Tape,
    spec: &ModelSpec,
    pn: &ParamNodes,
    x: NodeId,
) -> Result<NodeId, ModelError> {
    let z = forward_embed(tape, spec, pn, x)?;
    apply_head(tape, pn, z)
}

fn param(pn: &ParamNodes, name: &str) -> Result<NodeId, ModelError> {
    pn.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::lenet_corner_digits();
        let a = Parameters::init(&spec, 42).unwrap();
        let b = Parameters::init(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = Parameters::init(&spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dense_init_std_matches_fan_in_rule() {
        let spec = ModelSpec {
            input: vec![100],
            embedding: vec![LayerSpec::Dense { out_features: 50 }],
            classes: 2,
        };
        let params = Parameters::init(&spec, 7).unwrap();
        let w = params.get("phi.0.weight").unwrap();
        let n = w.len() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let want = (2.0f64 / 100.0).sqrt();
        assert!((var.sqrt() - want).abs() / want < 0.10, "std {} vs {}", var.sqrt(), want);
    }

    #[test]
    fn biases_are_exactly_zero() {
        let params = Parameters::init(&ModelSpec::lenet_corner_digits(), 3).unwrap();
        for (name, t) in params.entries() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            }
        }
    }

    #[test]
    fn partition_is_exact_and_disjoint() {
        let params = Parameters::init(&ModelSpec::lenet_corner_digits(), 3).unwrap();
        let phi: Vec<_> = params.phi_names().collect();
        let head: Vec<_> = params.head_names().collect();
        assert_eq!(phi.len() + head.len(), params.len());
        assert!(phi.iter().all(|n| !head.contains(n)));
        assert_eq!(head, ["head.weight", "head.bias"]);
    }

    #[test]
    fn identity_dense_embed_is_relu() {
        // single dense layer with W = I, b = 0, followed by relu
        let spec = ModelSpec {
            input: vec![3],
            embedding: vec![LayerSpec::Dense { out_features: 3 }, LayerSpec::Relu],
            classes: 2,
        };
        let mut params = Parameters::init(&spec, 0).unwrap();
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        *params.get_mut("phi.0.weight").unwrap() = eye;

        let mut tape = Tape::new();
        let pn = bind_params(&mut tape, &params);
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.5, 2.0]));
        let z = forward_embed(&mut tape, &spec, &pn, x).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 0.5, 2.0]);
    }

    #[test]
    fn lenet_shape_chain_gives_e64() {
        let spec = ModelSpec::lenet_corner_digits();
        assert_eq!(spec.embed_dim().unwrap(), 64);
        let shapes = spec.shape_chain().unwrap();
        assert_eq!(shapes[1], vec![8, 24, 24]);
        assert_eq!(shapes[3], vec![8, 12, 12]);
        assert_eq!(shapes[4], vec![16, 8, 8]);
        assert_eq!(shapes[6], vec![16, 4, 4]);
        assert_eq!(shapes[7], vec![256]);
    }

    #[test]
    fn logits_equal_head_of_embed() {
        let spec = ModelSpec::lenet_corner_digits();
        let params = Parameters::init(&spec, 5).unwrap();
        let mut tape = Tape::new();
        let pn = bind_params(&mut tape, &params);
        let x = tape.leaf(Tensor::filled(&[784], 0.3));
        let z = forward_embed(&mut tape, &spec, &pn, x).unwrap();
        let via_head = apply_head(&mut tape, &pn, z).unwrap();
        let direct = forward_logits(&mut tape, &spec, &pn, x).unwrap();
        for (a, b) in tape.value(via_head).data().iter().zip(tape.value(direct).data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = ModelSpec::lenet_corner_digits();
        let mut params = Parameters::init(&spec, 5).unwrap();
        for (_, t) in params.entries_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let pn = bind_params(&mut tape, &params);
        let x = tape.leaf(Tensor::filled(&[784], 0.7));
        let logits = forward_logits(&mut tape, &spec, &pn, x).unwrap();
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_ignores_head_weights() {
        let spec = ModelSpec::lenet_corner_digits();
        let params = Parameters::init(&spec, 5).unwrap();
        let x = Tensor::filled(&[784], 0.3);

        let embed = |p: &Parameters| -> Vec<f64> {
            let mut tape = Tape::new();
            let pn = bind_params(&mut tape, p);
            let xid = tape.leaf(x.clone());
            let z = forward_embed(&mut tape, &spec, &pn, xid).unwrap();
            tape.value(z).data().to_vec()
        };

        let before = embed(&params);
        let mut perturbed = params.clone();
        perturbed.get_mut("head.weight").unwrap().data_mut().fill(123.0);
        perturbed.get_mut("head.bias").unwrap().data_mut().fill(-7.0);
        assert_eq!(before, embed(&perturbed));
    }

    #[test]
    fn gradients_cross_the_phi_head_seam() {
        let spec = ModelSpec::lenet_corner_digits();
        let params = Parameters::init(&spec, 5).unwrap();
        let mut tape = Tape::new();
        let pn = bind_params(&mut tape, &params);
        let x = tape.leaf(Tensor::filled(&[784], 0.4));
        let logits = forward_logits(&mut tape, &spec, &pn, x).unwrap();
        let n = tape.norm(logits).unwrap();
        let grads = tape.gradient(n, &pn.node_ids()).unwrap();
        let nonzero = |name: &str| {
            grads
                .get(pn.get(name).unwrap())
                .map(|g| g.data().iter().any(|&v| v != 0.0))
                .unwrap_or(false)
        };
        assert!(nonzero("phi.0.weight"), "no gradient into first conv");
        assert!(nonzero("head.weight"), "no gradient into head");
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let spec = ModelSpec::lenet_corner_digits();
        let params = Parameters::init(&spec, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fclckpt");
        params.save_checkpoint(&path).unwrap();
        let loaded = Parameters::load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, b"NOTACKPT").unwrap();
        assert!(matches!(Parameters::load_checkpoint(&bad), Err(ModelError::BadMagic)));

        let spec = ModelSpec::linear_softmax(4, 2);
        let params = Parameters::init(&spec, 1).unwrap();
        let path = dir.path().join("model.fclckpt");
        params.save_checkpoint(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("trunc.fclckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Parameters::load_checkpoint(&truncated), Err(ModelError::Corrupt(_))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let no_flatten = ModelSpec {
            input: vec![1, 8, 8],
            embedding: vec![LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1 }],
            classes: 2,
        };
        assert!(no_flatten.validate().is_err());

        let dense_on_cube = ModelSpec {
            input: vec![1, 8, 8],
            embedding: vec![LayerSpec::Dense { out_features: 4 }],
            classes: 2,
        };
        assert!(dense_on_cube.validate().is_err());
    }

    #[test]
    fn batch_of_inputs_matches_single_results() {
        let spec = ModelSpec::lenet_corner_digits();
        let params = Parameters::init(&spec, 11).unwrap();
        let images: Vec<Tensor> = (0..3)
            .map(|i| Tensor::filled(&[784], 0.1 + 0.2 * i as f64))
            .collect();

        // batch: all examples share one tape and one parameter binding
        let mut tape = Tape::new();
        let pn = bind_params(&mut tape, &params);
        let batch: Vec<Vec<f64>> = images
            .iter()
            .map(|img| {
                let x = tape.leaf(img.clone());
                let z = forward_embed(&mut tape, &spec, &pn, x).unwrap();
                tape.value(z).data().to_vec()
            })
            .collect();

        for (img, from_batch) in images.iter().zip(&batch) {
            let mut solo = Tape::new();
            let pn = bind_params(&mut solo, &params);
            let x = solo.leaf(img.clone());
            let z = forward_embed(&mut solo, &spec, &pn, x).unwrap();
            assert_eq!(solo.value(z).data(), from_batch.as_slice());
        }
    }
}
