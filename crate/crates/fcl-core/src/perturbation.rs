//! Utility-aware perturbation construction: selecting the k most/least
//! useful features, sparse Gaussian noise restricted to an index set, and
//! the dense/patch Gaussian baselines.

use crate::attribution::UtilityVector;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PerturbationError {
    #[error("invalid perturbation input: {0}")]
    Invalid(String),
}

/// Noise shape for the contrastive pair construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct PerturbationSpec {
    /// How many features each of the top/bottom selections covers.
    pub k: usize,
    /// Standard deviation of the Gaussian noise, in pixel-intensity units.
    pub sigma: f64,
    /// Examples whose maximum utility falls below this lose their own
    /// negative pair (the utility signal is considered vanished).
    #[serde(default = "default_drop_threshold")]
    pub drop_threshold: f64,
}

fn default_drop_threshold() -> f64 {
    1e-12
}

impl PerturbationSpec {
    pub fn validate(&self, d: usize) -> Result<(), PerturbationError> {
        if self.k == 0 || self.k > d {
            return Err(PerturbationError::Invalid(format!(
                "k must be in 1..={d}, got {}",
                self.k
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(PerturbationError::Invalid(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.drop_threshold >= 0.0) {
            return Err(PerturbationError::Invalid(format!(
                "drop threshold must be >= 0, got {}",
                self.drop_threshold
            )));
        }
        Ok(())
    }
}

/// Sorted, distinct feature indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    indices: Vec<usize>,
}

impl IndexSet {
    pub fn new(mut indices: Vec<usize>, d: usize) -> Result<Self, PerturbationError> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(PerturbationError::Invalid("duplicate indices".into()));
        }
        if indices.last().is_some_and(|&i| i >= d) {
            return Err(PerturbationError::Invalid(format!(
                "index {} out of range for {d} features",
                indices.last().unwrap()
            )));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn empty() -> Self {
        Self { indices: Vec::new() }
    }
}

/// Indices of the k largest utilities; ties go to the lowest index.
pub fn top_k(u: &UtilityVector, k: usize) -> Result<IndexSet, PerturbationError> {
    select_k(u.values.data(), k, true)
}

/// Indices of the k smallest utilities; ties go to the lowest index.
pub fn bottom_k(u: &UtilityVector, k: usize) -> Result<IndexSet, PerturbationError> {
    select_k(u.values.data(), k, false)
}

fn select_k(values: &[f64], k: usize, largest: bool) -> Result<IndexSet, PerturbationError> {
    let d = values.len();
    if k == 0 || k > d {
        return Err(PerturbationError::Invalid(format!("k must be in 1..={d}, got {k}")));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        let by_value = if largest {
            values[b].partial_cmp(&values[a]).unwrap()
        } else {
            values[a].partial_cmp(&values[b]).unwrap()
        };
        by_value.then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    Ok(IndexSet { indices: order })
}

/// Noise vector with independent N(0, σ²) entries on `s` and exact zeros
/// everywhere else. Draws happen in ascending index order.
pub fn sample_sparse_gaussian(
    s: &IndexSet,
    d: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Tensor, PerturbationError> {
    if s.indices.last().is_some_and(|&i| i >= d) {
        return Err(PerturbationError::Invalid(format!("index set exceeds {d} features")));
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| PerturbationError::Invalid(format!("bad sigma {sigma}: {e}")))?;
    let mut data = vec![0.0; d];
    for &i in &s.indices {
        data[i] = normal.sample(rng);
    }
    Ok(Tensor::new(vec![d], data).unwrap())
}

/// Builds the contrastive pair inputs for one example: the positive input
/// perturbs the k *least* useful features, the negative the k *most* useful.
/// When max(u) falls below the drop threshold the negative is withheld.
/// Outputs are NOT clipped to [0,1]; they are transient loss inputs.
pub fn make_fcl_pair_inputs(
    x: &Tensor,
    u: &UtilityVector,
    spec: &PerturbationSpec,
    rng: &mut impl Rng,
) -> Result<(Tensor, Option<Tensor>), PerturbationError> {
    let d = x.len();
    if u.values.len() != d {
        return Err(PerturbationError::Invalid(format!(
            "utility has {} entries for {d} features",
            u.values.len()
        )));
    }
    spec.validate(d)?;

    let low = bottom_k(u, spec.k)?;
    let noise = sample_sparse_gaussian(&low, d, spec.sigma, rng)?;
    let mut x_plus = x.clone();
    for (v, n) in x_plus.data_mut().iter_mut().zip(noise.data()) {
        *v += n;
    }

    let max_u = u.values.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let x_minus = if max_u < spec.drop_threshold {
        None
    } else {
        let high = top_k(u, spec.k)?;
        let noise = sample_sparse_gaussian(&high, d, spec.sigma, rng)?;
        let mut xm = x.clone();
        for (v, n) in xm.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
        Some(xm)
    };
    Ok((x_plus, x_minus))
}

/// x plus dense N(0, σ²) noise on every coordinate; not clipped.
pub fn gaussian_full(x: &Tensor, sigma: f64, rng: &mut impl Rng) -> Result<Tensor, PerturbationError> {
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| PerturbationError::Invalid(format!("bad sigma {sigma}: {e}")))?;
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += normal.sample(rng);
    }
    Ok(out)
}

/// Adds N(0, σ²) noise inside a `patch_size`-square window centered on a
/// uniformly random pixel (window clipped at the borders), then clamps the
/// noised pixels to [0, 1]. Pixels outside the window are untouched. The
/// image may be [H,W] or [C,H,W]; all channels share the window.
pub fn patch_gaussian(
    image: &Tensor,
    patch_size: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Tensor, PerturbationError> {
    let (channels, h, w) = match image.dims() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(PerturbationError::Invalid(format!(
                "image must be [H,W] or [C,H,W], got {other:?}"
            )))
        }
    };
    if patch_size == 0 {
        return Err(PerturbationError::Invalid("patch size must be >= 1".into()));
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| PerturbationError::Invalid(format!("bad sigma {sigma}: {e}")))?;

    let center_row = rng.gen_range(0..h) as isize;
    let center_col = rng.gen_range(0..w) as isize;
    let half = ((patch_size - 1) / 2) as isize;
    let p = patch_size as isize;
    let row_start = (center_row - half).clamp(0, h as isize) as usize;
    let row_end = (center_row - half + p).clamp(0, h as isize) as usize;
    let col_start = (center_col - half).clamp(0, w as isize) as usize;
    let col_end = (center_col - half + p).clamp(0, w as isize) as usize;

    let mut out = image.clone();
    let data = out.data_mut();
    for c in 0..channels {
        for row in row_start..row_end {
            for col in col_start..col_end {
                let at = (c * h + row) * w + col;
                data[at] = (data[at] + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}
