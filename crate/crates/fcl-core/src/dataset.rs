//! Image datasets for the corner-digit task: IDX file I/O, a procedural
//! digit generator usable as the 10-class source corpus, the corner-insert
//! synthesizer that produces the unbalanced 15-class splits, and the
//! uniform / std-weighted test-time noise injectors.

use crate::rng::{self, purpose};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const IMG_SIDE: usize = 28;
pub const IMG_PIXELS: usize = IMG_SIDE * IMG_SIDE;
/// Pixels whose sample std falls below this still get finite selection
/// weight in the std-weighted noise injector.
pub const STD_FLOOR: f64 = 1e-3;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad idx magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("corrupt idx file: {0}")]
    Corrupt(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("insufficient source images: {0}")]
    InsufficientSource(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Which corner a down-scaled digit was inserted into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Corner {
    pub const ALL: [Corner; 4] = [Corner::TopLeft, Corner::TopRight, Corner::BottomLeft, Corner::BottomRight];

    /// Top-left pixel of this corner's `size`×`size` window in a 28×28 image.
    pub fn origin(self, size: usize) -> (usize, usize) {
        match self {
            Corner::TopLeft => (0, 0),
            Corner::TopRight => (0, IMG_SIDE - size),
            Corner::BottomLeft => (IMG_SIDE - size, 0),
            Corner::BottomRight => (IMG_SIDE - size, IMG_SIDE - size),
        }
    }
}

/// How one synthesized image was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CornerInsert {
    pub position: Corner,
    pub source_digit: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// The digit drawn at the image center.
    pub base_digit: u8,
    /// The corner insert, when one was composited in.
    pub corner: Option<CornerInsert>,
}

/// The 15-class label implied by construction: a corner promotes base
/// digits 0–4 to classes 10–14 and leaves 5–9 unchanged.
pub fn label_rule(p: &Provenance) -> u8 {
    match p.corner {
        Some(_) if p.base_digit < 5 => p.base_digit + 10,
        _ => p.base_digit,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    /// N × 784, row-major, values in [0, 1].
    images: Vec<f64>,
    labels: Vec<u8>,
    class_count: usize,
    split: Split,
    provenance: Option<Vec<Provenance>>,
}

impl ImageDataset {
    pub fn new(
        images: Vec<f64>,
        labels: Vec<u8>,
        class_count: usize,
        split: Split,
    ) -> Result<Self, DatasetError> {
        if labels.is_empty() {
            return Err(DatasetError::Invalid("dataset is empty".into()));
        }
        if images.len() != labels.len() * IMG_PIXELS {
            return Err(DatasetError::Invalid(format!(
                "{} pixel values for {} labels",
                images.len(),
                labels.len()
            )));
        }
        if images.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(DatasetError::Invalid("pixel outside [0,1]".into()));
        }
        if labels.iter().any(|&l| l as usize >= class_count) {
            return Err(DatasetError::Invalid(format!("label >= class count {class_count}")));
        }
        Ok(Self { images, labels, class_count, split, provenance: None })
    }

    pub fn with_provenance(mut self, provenance: Vec<Provenance>) -> Result<Self, DatasetError> {
        if provenance.len() != self.labels.len() {
            return Err(DatasetError::Invalid("provenance length mismatch".into()));
        }
        self.provenance = Some(provenance);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * IMG_PIXELS..(i + 1) * IMG_PIXELS]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::new(vec![IMG_PIXELS], self.image(i).to_vec()).unwrap()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn provenance(&self) -> Option<&[Provenance]> {
        self.provenance.as_deref()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// IDX I/O

/// Reads the classic big-endian IDX pair: images (magic 0x00000803, u8
/// pixels scaled to [0,1] by /255) and labels (magic 0x00000801).
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<ImageDataset, DatasetError> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;

    let mut at = 0usize;
    let magic = read_be_u32(&image_bytes, &mut at)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::BadMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n = read_be_u32(&image_bytes, &mut at)? as usize;
    let rows = read_be_u32(&image_bytes, &mut at)? as usize;
    let cols = read_be_u32(&image_bytes, &mut at)? as usize;
    if rows != IMG_SIDE || cols != IMG_SIDE {
        return Err(DatasetError::Corrupt(format!("expected 28x28 images, got {rows}x{cols}")));
    }
    if image_bytes.len() != at + n * IMG_PIXELS {
        return Err(DatasetError::Corrupt(format!(
            "image payload is {} bytes, header promises {}",
            image_bytes.len() - at,
            n * IMG_PIXELS
        )));
    }
    let images: Vec<f64> = image_bytes[at..].iter().map(|&b| b as f64 / 255.0).collect();

    let mut at = 0usize;
    let magic = read_be_u32(&label_bytes, &mut at)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DatasetError::BadMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n_labels = read_be_u32(&label_bytes, &mut at)? as usize;
    if n_labels != n {
        return Err(DatasetError::Corrupt(format!("{n} images but {n_labels} labels")));
    }
    if label_bytes.len() != at + n {
        return Err(DatasetError::Corrupt("label payload truncated".into()));
    }
    let labels = label_bytes[at..].to_vec();
    let class_count = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    ImageDataset::new(images, labels, class_count.max(10), split)
}

/// Writes the dataset back out as an IDX pair (pixels as round(v·255)).
pub fn save_idx(
    ds: &ImageDataset,
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), DatasetError> {
    let n = ds.len() as u32;
    let mut image_bytes = Vec::with_capacity(16 + ds.images.len());
    image_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&n.to_be_bytes());
    image_bytes.extend_from_slice(&(IMG_SIDE as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(IMG_SIDE as u32).to_be_bytes());
    image_bytes.extend(ds.images.iter().map(|&v| (v * 255.0).round() as u8));
    std::fs::File::create(images_path)?.write_all(&image_bytes)?;

    let mut label_bytes = Vec::with_capacity(8 + ds.labels.len());
    label_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&n.to_be_bytes());
    label_bytes.extend_from_slice(&ds.labels);
    std::fs::File::create(labels_path)?.write_all(&label_bytes)?;
    Ok(())
}

fn read_be_u32(bytes: &[u8], at: &mut usize) -> Result<u32, DatasetError> {
    if *at + 4 > bytes.len() {
        return Err(DatasetError::Corrupt(format!("truncated at byte {at}")));
    }
    let v = u32::from_be_bytes(bytes[*at..*at + 4].try_into().unwrap());
    *at += 4;
    Ok(v)
}

// ---------------------------------------------------------------------------
// Procedural digit source

/// 5×7 digit glyphs; each byte is one row, bit 4 the leftmost column.
const FONT: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

fn glyph_cell(digit: usize, row: isize, col: isize) -> f64 {
    if !(0..7).contains(&row) || !(0..5).contains(&col) {
        return 0.0;
    }
    ((FONT[digit][row as usize] >> (4 - col as usize)) & 1) as f64
}

/// Bilinear sample of the glyph bitmap at fractional source coordinates.
fn glyph_sample(digit: usize, src_row: f64, src_col: f64) -> f64 {
    let r0 = src_row.floor();
    let c0 = src_col.floor();
    let fr = src_row - r0;
    let fc = src_col - c0;
    let (r0, c0) = (r0 as isize, c0 as isize);
    glyph_cell(digit, r0, c0) * (1.0 - fr) * (1.0 - fc)
        + glyph_cell(digit, r0, c0 + 1) * (1.0 - fr) * fc
        + glyph_cell(digit, r0 + 1, c0) * fr * (1.0 - fc)
        + glyph_cell(digit, r0 + 1, c0 + 1) * fr * fc
}

/// Upper bound of the per-pixel background speckle added to every render.
/// Keeps every pixel's dataset-level standard deviation strictly positive
/// (like scanned handwriting, where no pixel is constant across a corpus),
/// so inverse-std noise selection spreads over the whole quiet region
/// instead of collapsing onto a small always-zero set.
pub const SPECKLE_MAX: f64 = 0.04;

/// Renders one 28×28 digit image: the glyph is scaled to a random height,
/// drawn at a random stroke intensity with mild per-pixel texture, and
/// placed near the image center with positional jitter, over a faint
/// speckled background. Corners carry no glyph content, mirroring
/// handwritten digits photographed on a centered canvas.
fn render_digit(digit: usize, r: &mut impl Rng) -> Vec<f64> {
    let height = r.gen_range(14..=20usize);
    let width = (height * 5 + 3) / 7;
    let intensity = r.gen_range(0.65..1.0);
    let row_jitter = r.gen_range(-2..=2isize);
    let col_jitter = r.gen_range(-2..=2isize);
    let top = (IMG_SIDE as isize / 2 + row_jitter - height as isize / 2).max(0) as usize;
    let left = (IMG_SIDE as isize / 2 + col_jitter - width as isize / 2).max(0) as usize;

    let mut image = vec![0.0; IMG_PIXELS];
    for rr in 0..height.min(IMG_SIDE - top) {
        for cc in 0..width.min(IMG_SIDE - left) {
            let src_row = (rr as f64 + 0.5) * 7.0 / height as f64 - 0.5;
            let src_col = (cc as f64 + 0.5) * 5.0 / width as f64 - 0.5;
            let v = glyph_sample(digit, src_row, src_col);
            if v > 0.0 {
                let texture = r.gen_range(0.85..1.0);
                image[(top + rr) * IMG_SIDE + left + cc] = (v * intensity * texture).clamp(0.0, 1.0);
            }
        }
    }
    for p in image.iter_mut() {
        *p = (*p + r.gen_range(0.0..SPECKLE_MAX)).min(1.0);
    }
    image
}

/// Generates a 10-class digit corpus procedurally, `per_digit` images per
/// digit, deterministic in `seed`. Serves as the source dataset when no
/// real IDX corpus is on disk.
pub fn generate_base(per_digit: usize, seed: u64) -> Result<ImageDataset, DatasetError> {
    if per_digit == 0 {
        return Err(DatasetError::Invalid("per-digit count must be positive".into()));
    }
    let mut images = Vec::with_capacity(per_digit * 10 * IMG_PIXELS);
    let mut labels = Vec::with_capacity(per_digit * 10);
    for digit in 0..10usize {
        for index in 0..per_digit {
            let mut r = rng::stream(seed, &[purpose::SYNTH, 0, digit as u64, index as u64]);
            images.extend(render_digit(digit, &mut r));
            labels.push(digit as u8);
        }
    }
    ImageDataset::new(images, labels, 10, Split::Train)
}

// ---------------------------------------------------------------------------
// Corner-digit synthesis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Documented target ratio of rare (10–14) to base class counts.
    pub rare_ratio: f64,
    pub train_per_base: usize,
    pub train_per_rare: usize,
    /// Validation and test images per class (15 classes each).
    pub eval_per_class: usize,
    /// Down-scale factor for the corner insert; 4 → 7×7 inserts.
    pub corner_scale: usize,
    /// Fraction of train-split class-5–9 images that carry a corner insert.
    pub distractor_corner_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rare_ratio: 0.01,
            train_per_base: 5000,
            train_per_rare: 50,
            eval_per_class: 1000,
            corner_scale: 4,
            distractor_corner_fraction: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.train_per_base == 0 || self.train_per_rare == 0 || self.eval_per_class == 0 {
            return Err(DatasetError::Invalid("split counts must be positive".into()));
        }
        if self.corner_scale < 2 || IMG_SIDE % self.corner_scale != 0 {
            return Err(DatasetError::Invalid(format!(
                "corner scale must divide {IMG_SIDE} and be >= 2, got {}",
                self.corner_scale
            )));
        }
        if !(self.rare_ratio > 0.0) {
            return Err(DatasetError::Invalid("rare ratio must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_corner_fraction) {
            return Err(DatasetError::Invalid("distractor corner fraction must be in [0,1]".into()));
        }
        Ok(())
    }

    pub fn insert_size(&self) -> usize {
        IMG_SIDE / self.corner_scale
    }
}

/// Down-scales `source` by `scale`×`scale` average pooling and composites
/// it into `center`'s chosen corner by pixel-wise max (keeps range [0,1]).
pub fn composite_corner(
    center: &[f64],
    source: &[f64],
    scale: usize,
    corner: Corner,
) -> Vec<f64> {
    let size = IMG_SIDE / scale;
    let (row0, col0) = corner.origin(size);
    let mut out = center.to_vec();
    let denom = (scale * scale) as f64;
    for r in 0..size {
        for c in 0..size {
            let mut total = 0.0;
            for dr in 0..scale {
                for dc in 0..scale {
                    total += source[(r * scale + dr) * IMG_SIDE + c * scale + dc];
                }
            }
            let at = (row0 + r) * IMG_SIDE + col0 + c;
            out[at] = out[at].max(total / denom);
        }
    }
    out
}

/// Builds the unbalanced 15-class corner-digit task from a 10-class source.
/// Train: classes 0–4 clean, 5–9 (almost) all corner-bearing, rare classes
/// 10–14 corner-bearing centers 0–4. Val/test: uniform per class, 5–9
/// corner-bearing, 0–4 clean. Source images are partitioned 60/20/20 per
/// digit across the three output splits so no pixel data leaks between them.
pub fn synthesize(
    base: &ImageDataset,
    cfg: &SynthConfig,
) -> Result<(ImageDataset, ImageDataset, ImageDataset), DatasetError> {
    cfg.validate()?;
    if base.class_count() != 10 {
        return Err(DatasetError::Invalid(format!(
            "source must have 10 classes, got {}",
            base.class_count()
        )));
    }

    // per-digit index pools, shuffled then cut 60/20/20
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for i in 0..base.len() {
        pools[base.label(i)].push(i);
    }
    let mut split_pools: [Vec<Vec<usize>>; 3] = Default::default();
    for digit in 0..10 {
        let mut pool = pools[digit].clone();
        let mut r = rng::stream(cfg.seed, &[purpose::SYNTH, 4, digit as u64]);
        pool.shuffle(&mut r);
        let n = pool.len();
        let n_train = n * 6 / 10;
        let n_val = n * 2 / 10;
        split_pools[0].push(pool[..n_train].to_vec());
        split_pools[1].push(pool[n_train..n_train + n_val].to_vec());
        split_pools[2].push(pool[n_train + n_val..].to_vec());
    }

    let train = build_split(base, cfg, Split::Train, 1, &split_pools[0])?;
    let val = build_split(base, cfg, Split::Val, 2, &split_pools[1])?;
    let test = build_split(base, cfg, Split::Test, 3, &split_pools[2])?;
    Ok((train, val, test))
}

fn build_split(
    base: &ImageDataset,
    cfg: &SynthConfig,
    split: Split,
    split_code: u64,
    pools: &[Vec<usize>],
) -> Result<ImageDataset, DatasetError> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut provenance = Vec::new();

    let class_plan: Vec<(u8, usize)> = match split {
        Split::Train => (0..15)
            .map(|c| {
                let count = if c < 10 { cfg.train_per_base } else { cfg.train_per_rare };
                (c as u8, count)
            })
            .collect(),
        Split::Val | Split::Test => (0..15).map(|c| (c as u8, cfg.eval_per_class)).collect(),
    };

    for (class, count) in class_plan {
        let center_digit = if class < 10 { class } else { class - 10 };
        let pool = &pools[center_digit as usize];
        if pool.is_empty() {
            return Err(DatasetError::InsufficientSource(format!(
                "no source images of digit {center_digit} available for the {split:?} split"
            )));
        }
        for index in 0..count {
            let mut r = rng::stream(cfg.seed, &[purpose::SYNTH, split_code, class as u64, index as u64]);
            // train distractors may skip the corner per the configured
            // fraction; eval distractors always carry one
            let wants_corner = if class >= 10 {
                true
            } else if class >= 5 {
                split != Split::Train || r.gen_bool(cfg.distractor_corner_fraction)
            } else {
                false
            };
            let center_index = pool[r.gen_range(0..pool.len())];
            let center = base.image(center_index);

            if wants_corner {
                let source_digit = r.gen_range(0..10usize);
                let source_pool = &pools[source_digit];
                if source_pool.is_empty() {
                    return Err(DatasetError::InsufficientSource(format!(
                        "no source images of digit {source_digit} available for corner inserts"
                    )));
                }
                let source_index = source_pool[r.gen_range(0..source_pool.len())];
                let position = Corner::ALL[r.gen_range(0..4)];
                images.extend(composite_corner(
                    center,
                    base.image(source_index),
                    cfg.corner_scale,
                    position,
                ));
                provenance.push(Provenance {
                    base_digit: center_digit,
                    corner: Some(CornerInsert { position, source_digit: source_digit as u8 }),
                });
            } else {
                images.extend_from_slice(center);
                provenance.push(Provenance { base_digit: center_digit, corner: None });
            }
            labels.push(label_rule(provenance.last().unwrap()));
            debug_assert_eq!(*labels.last().unwrap(), class);
        }
    }

    ImageDataset::new(images, labels, 15, split)?.with_provenance(provenance)
}

/// Sidecar description of one generated split, written next to the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DatasetMeta {
    pub split: Split,
    pub config: SynthConfig,
    pub class_histogram: Vec<usize>,
    pub corner_bearing: usize,
}

impl DatasetMeta {
    pub fn describe(ds: &ImageDataset, cfg: &SynthConfig) -> Self {
        let corner_bearing = ds
            .provenance()
            .map(|p| p.iter().filter(|p| p.corner.is_some()).count())
            .unwrap_or(0);
        Self {
            split: ds.split(),
            config: cfg.clone(),
            class_histogram: ds.histogram(),
            corner_bearing,
        }
    }
}

// ---------------------------------------------------------------------------
// Noise injectors

/// Per-pixel sample standard deviations over a dataset's images.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelStdMap {
    values: Vec<f64>,
}

impl PixelStdMap {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn side(&self) -> usize {
        IMG_SIDE
    }
}

/// Unbiased (N−1) per-pixel standard deviation over all images.
pub fn pixel_std(ds: &ImageDataset) -> Result<PixelStdMap, DatasetError> {
    let n = ds.len();
    if n < 2 {
        return Err(DatasetError::Invalid("need at least 2 images for a sample std".into()));
    }
    let mut mean = vec![0.0; IMG_PIXELS];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(ds.image(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; IMG_PIXELS];
    for i in 0..n {
        for (j, &v) in ds.image(i).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    let values = var.iter().map(|s| (s / (n as f64 - 1.0)).sqrt()).collect();
    Ok(PixelStdMap { values })
}

/// Number of pixels replaced at a given fraction (round(frac · 784)).
pub fn replaced_pixel_count(frac: f64) -> usize {
    (frac * IMG_PIXELS as f64).round() as usize
}

/// Replaces round(frac·784) uniformly chosen pixel positions per image with
/// independent Uniform[0,1] gray levels. Labels are untouched. Deterministic
/// per (seed, image index).
pub fn noise_uniform(ds: &ImageDataset, frac: f64, seed: u64) -> Result<ImageDataset, DatasetError> {
    validate_frac(frac)?;
    let count = replaced_pixel_count(frac);
    let mut out = ds.clone();
    for i in 0..out.len() {
        let mut r = rng::stream(seed, &[purpose::NOISE, 1, i as u64]);
        let positions = sample_positions_uniform(&mut r, count);
        let image = &mut out.images[i * IMG_PIXELS..(i + 1) * IMG_PIXELS];
        for p in positions {
            image[p] = r.gen_range(0.0..1.0);
        }
    }
    Ok(out)
}

/// Like `noise_uniform`, but positions are drawn without replacement with
/// weights 1 / max(std_j, STD_FLOOR), concentrating noise on pixels that
/// vary little across the training set.
pub fn noise_nonuniform(
    ds: &ImageDataset,
    std_map: &PixelStdMap,
    frac: f64,
    seed: u64,
) -> Result<ImageDataset, DatasetError> {
    validate_frac(frac)?;
    let count = replaced_pixel_count(frac);
    let weights: Vec<f64> = std_map.values().iter().map(|&s| 1.0 / s.max(STD_FLOOR)).collect();
    let mut out = ds.clone();
    for i in 0..out.len() {
        let mut r = rng::stream(seed, &[purpose::NOISE, 2, i as u64]);
        let positions = sample_positions_weighted(&mut r, &weights, count);
        let image = &mut out.images[i * IMG_PIXELS..(i + 1) * IMG_PIXELS];
        for p in positions {
            image[p] = r.gen_range(0.0..1.0);
        }
    }
    Ok(out)
}

fn validate_frac(frac: f64) -> Result<(), DatasetError> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(DatasetError::Invalid(format!("noise fraction must be in [0,1], got {frac}")));
    }
    Ok(())
}

/// First `count` entries of a partial Fisher–Yates shuffle over 0..784.
fn sample_positions_uniform(r: &mut impl Rng, count: usize) -> Vec<usize> {
    let mut positions: Vec<usize> = (0..IMG_PIXELS).collect();
    for i in 0..count.min(IMG_PIXELS) {
        let j = r.gen_range(i..IMG_PIXELS);
        positions.swap(i, j);
    }
    positions.truncate(count);
    positions
}

/// Sequential weighted sampling without replacement.
fn sample_positions_weighted(r: &mut impl Rng, weights: &[f64], count: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut total: f64 = weights.iter().sum();
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count.min(weights.len()) {
        let mut target = r.gen_range(0.0..total);
        let mut chosen = remaining.len() - 1;
        for (slot, &p) in remaining.iter().enumerate() {
            target -= weights[p];
            if target < 0.0 {
                chosen = slot;
                break;
            }
        }
        let p = remaining.swap_remove(chosen);
        total -= weights[p];
        picked.push(p);
    }
    picked
}
