//! Model evaluation: accuracy reports, class-averaged utility maps for
//! visual inspection, Pearson correlation, and the sensitivity-alignment
//! protocol that scores per-feature sensitivity against a supplied
//! ground-truth strength vector.

use crate::attribution::{self, AttributionError};
use crate::dataset::{ImageDataset, IMG_PIXELS, IMG_SIDE};
use crate::engine::EngineError;
use crate::model::{self, ModelError, ModelSpec, Parameters};
use crate::tensor::Tensor;
use crate::Tape;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error("zero-variance input: Pearson correlation undefined")]
    ZeroVariance,
    #[error("no example kept >= 2 features outside the neutral band")]
    NoSurvivingFeatures,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
}

/// Accuracy of one model on one dataset, with the per-class breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DatasetScore {
    pub name: String,
    pub accuracy: f64,
    pub examples: usize,
    pub per_class: Vec<ClassScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ClassScore {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Scores across several datasets for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalReport {
    pub seed: u64,
    pub checkpoint: String,
    pub datasets: Vec<DatasetScore>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One `overall` row plus one row per class, per dataset.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,scope,correct,total,accuracy\n");
        for ds in &self.datasets {
            let correct: usize = ds.per_class.iter().map(|c| c.correct).sum();
            out.push_str(&format!(
                "{},overall,{},{},{}\n",
                ds.name, correct, ds.examples, ds.accuracy
            ));
            for c in &ds.per_class {
                out.push_str(&format!(
                    "{},class-{},{},{},{}\n",
                    ds.name, c.class, c.correct, c.total, c.accuracy
                ));
            }
        }
        out
    }
}

/// Predicted class: argmax over logits, ties to the lowest class index.
pub fn predict(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
) -> Result<usize, EvalError> {
    let mut tape = Tape::new();
    let pn = model::bind_params(&mut tape, params);
    let xid = tape.leaf(x.clone());
    let logits = model::forward_logits(&mut tape, spec, &pn, xid)?;
    Ok(tape.value(logits).argmax())
}

/// Fraction of examples whose argmax logit matches the label.
pub fn accuracy(
    spec: &ModelSpec,
    params: &Parameters,
    ds: &ImageDataset,
    name: &str,
) -> Result<DatasetScore, EvalError> {
    if spec.classes != ds.class_count() {
        return Err(EvalError::Invalid(format!(
            "model has {} classes, dataset {}",
            spec.classes,
            ds.class_count()
        )));
    }
    let mut per_class: Vec<(usize, usize)> = vec![(0, 0); ds.class_count()];
    let mut tape = Tape::new();
    let mut pn = model::bind_params(&mut tape, params);
    for i in 0..ds.len() {
        // evaluation is forward-only; keep the tape from growing unboundedly
        if tape.len() > 200_000 {
            tape = Tape::new();
            pn = model::bind_params(&mut tape, params);
        }
        let xid = tape.leaf(ds.image_tensor(i));
        let logits = model::forward_logits(&mut tape, spec, &pn, xid)?;
        let predicted = tape.value(logits).argmax();
        let label = ds.label(i);
        per_class[label].1 += 1;
        if predicted == label {
            per_class[label].0 += 1;
        }
    }
    let correct: usize = per_class.iter().map(|(c, _)| c).sum();
    let scores = per_class
        .iter()
        .enumerate()
        .filter(|(_, (_, total))| *total > 0)
        .map(|(class, &(correct, total))| ClassScore {
            class,
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        })
        .collect();
    Ok(DatasetScore {
        name: name.to_string(),
        accuracy: correct as f64 / ds.len() as f64,
        examples: ds.len(),
        per_class: scores,
    })
}

/// Class-group mean image and mean utility map.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityMap {
    pub group: usize,
    pub mean_image: Vec<f64>,
    pub mean_utility: Vec<f64>,
    pub count: usize,
}

/// Maps plus the groups that had no examples (reported, not silently lost).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAvgOutcome {
    pub maps: Vec<UtilityMap>,
    pub skipped_groups: Vec<usize>,
}

/// Averages images and utility maps over label groups (label mod
/// `group_mod`). Empty groups are skipped and reported in the outcome.
pub fn class_avg_utility(
    spec: &ModelSpec,
    params: &Parameters,
    ds: &ImageDataset,
    group_mod: usize,
) -> Result<ClassAvgOutcome, EvalError> {
    if group_mod == 0 {
        return Err(EvalError::Invalid("group modulus must be positive".into()));
    }
    let mut image_sums = vec![vec![0.0f64; IMG_PIXELS]; group_mod];
    let mut utility_sums = vec![vec![0.0f64; IMG_PIXELS]; group_mod];
    let mut counts = vec![0usize; group_mod];

    const CHUNK: usize = 32;
    let mut at = 0;
    while at < ds.len() {
        let end = (at + CHUNK).min(ds.len());
        let xs: Vec<Tensor> = (at..end).map(|i| ds.image_tensor(i)).collect();
        let labels: Vec<usize> = (at..end).map(|i| ds.label(i)).collect();
        let utilities = attribution::utility_continuous_batch(spec, params, &xs, &labels)?;
        for (offset, u) in utilities.into_iter().enumerate() {
            let group = labels[offset] % group_mod;
            counts[group] += 1;
            for (acc, &v) in image_sums[group].iter_mut().zip(xs[offset].data()) {
                *acc += v;
            }
            for (acc, &v) in utility_sums[group].iter_mut().zip(u.values.data()) {
                *acc += v;
            }
        }
        at = end;
    }

    let mut maps = Vec::new();
    let mut skipped = Vec::new();
    for group in 0..group_mod {
        if counts[group] == 0 {
            skipped.push(group);
            continue;
        }
        let n = counts[group] as f64;
        maps.push(UtilityMap {
            group,
            mean_image: image_sums[group].iter().map(|v| v / n).collect(),
            mean_utility: utility_sums[group].iter().map(|v| v / n).collect(),
            count: counts[group],
        });
    }
    Ok(ClassAvgOutcome { maps, skipped_groups: skipped })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(EvalError::Invalid("need at least 2 points".into()));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// Per-example Pearson between the model's per-feature sensitivity and a
/// ground-truth strength vector, after dropping features whose strength
/// falls inside the neutral band [lo, hi]. Examples keeping fewer than two
/// features, or with zero variance on either side, do not contribute.
/// Errors when no example contributes at all.
pub fn sensitivity_alignment(
    spec: &ModelSpec,
    params: &Parameters,
    images: &[Tensor],
    strengths: &[Vec<f64>],
    neutral_band: (f64, f64),
) -> Result<f64, EvalError> {
    if images.len() != strengths.len() {
        return Err(EvalError::Invalid(format!(
            "{} images vs {} strength vectors",
            images.len(),
            strengths.len()
        )));
    }
    if images.is_empty() {
        return Err(EvalError::Invalid("no examples supplied".into()));
    }
    let (lo, hi) = neutral_band;
    let mut total = 0.0;
    let mut contributing = 0usize;
    for (x, strength) in images.iter().zip(strengths) {
        if strength.len() != x.len() {
            return Err(EvalError::Invalid(format!(
                "strength vector has {} entries for {} features",
                strength.len(),
                x.len()
            )));
        }
        let s = attribution::sensitivity_continuous(spec, params, x)?;
        let mut kept_sensitivity = Vec::new();
        let mut kept_strength = Vec::new();
        for (j, &g) in strength.iter().enumerate() {
            if !(lo..=hi).contains(&g) {
                kept_sensitivity.push(s.values.data()[j]);
                kept_strength.push(g);
            }
        }
        if kept_strength.len() < 2 {
            continue;
        }
        match pearson(&kept_sensitivity, &kept_strength) {
            Ok(r) => {
                total += r;
                contributing += 1;
            }
            Err(EvalError::ZeroVariance) => continue,
            Err(e) => return Err(e),
        }
    }
    if contributing == 0 {
        return Err(EvalError::NoSurvivingFeatures);
    }
    Ok(total / contributing as f64)
}

// ---------------------------------------------------------------------------
// Grid exports

/// Writes a square grid as CSV, one image row per line.
pub fn grid_to_csv(values: &[f64], side: usize) -> String {
    let mut out = String::new();
    for row in 0..side {
        let cells: Vec<String> =
            (0..side).map(|col| format!("{}", values[row * side + col])).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Min-max normalizes a grid to 8-bit and encodes it as a binary PGM (P5)
/// image. A constant grid maps to all-zero pixels.
pub fn grid_to_pgm(values: &[f64], side: usize) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for &v in values {
        let byte = if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
        out.push(byte);
    }
    out
}

/// Mean value over each corner window of a 28×28 map, all four corners.
pub fn corner_window_mean(map: &[f64], window: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for corner in crate::dataset::Corner::ALL {
        let (r0, c0) = corner.origin(window);
        for r in 0..window {
            for c in 0..window {
                total += map[(r0 + r) * IMG_SIDE + c0 + c];
                count += 1;
            }
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_base, synthesize, Split, SynthConfig};
    use crate::model::LayerSpec;

    fn tiny_synth(seed: u64) -> (ImageDataset, ImageDataset, ImageDataset) {
        let base = generate_base(60, seed).unwrap();
        let cfg = SynthConfig {
            train_per_base: 12,
            train_per_rare: 2,
            eval_per_class: 4,
            seed,
            ..SynthConfig::default()
        };
        synthesize(&base, &cfg).unwrap()
    }

    #[test]
    fn constant_predictor_scores_one_over_classes() {
        let (_, _, test) = tiny_synth(1);
        let spec = ModelSpec::lenet_corner_digits();
        let mut params = Parameters::init(&spec, 0).unwrap();
        for (_, t) in params.entries_mut() {
            t.data_mut().fill(0.0);
        }
        let score = accuracy(&spec, &params, &test, "balanced").unwrap();
        assert!((score.accuracy - 1.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn indicator_pixels_make_a_perfect_classifier() {
        // images that light exactly one class-identifying pixel, and a
        // linear model whose head reads those pixels
        let classes = 4;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let class = i % classes;
            let mut img = vec![0.0; IMG_PIXELS];
            img[class * 31] = 1.0;
            images.extend(img);
            labels.push(class as u8);
        }
        let ds = ImageDataset::new(images, labels, classes, Split::Test).unwrap();

        let spec = ModelSpec::linear_softmax(IMG_PIXELS, classes);
        let mut params = Parameters::init(&spec, 0).unwrap();
        let w = params.get_mut("head.weight").unwrap();
        w.data_mut().fill(0.0);
        for class in 0..classes {
            w.data_mut()[class * IMG_PIXELS + class * 31] = 10.0;
        }
        params.get_mut("head.bias").unwrap().data_mut().fill(0.0);

        let score = accuracy(&spec, &params, &ds, "indicators").unwrap();
        assert_eq!(score.accuracy, 1.0);
    }

    #[test]
    fn per_class_scores_weighted_average_to_overall() {
        let (train, _, _) = tiny_synth(2);
        let spec = ModelSpec::lenet_corner_digits();
        let params = Parameters::init(&spec, 3).unwrap();
        let score = accuracy(&spec, &params, &train, "train").unwrap();
        let weighted: f64 = score
            .per_class
            .iter()
            .map(|c| c.accuracy * c.total as f64 / score.examples as f64)
            .sum();
        assert!((weighted - score.accuracy).abs() < 1e-12);
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let (_, _, test) = tiny_synth(3);
        let spec = ModelSpec::linear_softmax(IMG_PIXELS, 9);
        let params = Parameters::init(&spec, 0).unwrap();
        assert!(matches!(
            accuracy(&spec, &params, &test, "x"),
            Err(EvalError::Invalid(_))
        ));
    }

    #[test]
    fn pearson_known_values() {
        let a = [1.0, 2.0, 3.0];
        assert!((pearson(&a, &[3.0, 5.0, 7.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&a, &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_symmetric_and_affine_invariant() {
        let a = [0.3, -1.2, 0.8, 2.0, 0.1];
        let b = [1.0, 0.4, -0.6, 1.7, 0.9];
        let ab = pearson(&a, &b).unwrap();
        assert!((ab - pearson(&b, &a).unwrap()).abs() < 1e-15);
        let scaled: Vec<f64> = a.iter().map(|v| 7.5 * v + 3.0).collect();
        assert!((pearson(&scaled, &b).unwrap() - ab).abs() < 1e-12);
    }

    #[test]
    fn pearson_rejects_degenerate_input() {
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(EvalError::ZeroVariance)));
        assert!(matches!(pearson(&[1.0], &[2.0]), Err(EvalError::Invalid(_))));
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0, 2.0, 3.0]), Err(EvalError::Invalid(_))));
    }

    #[test]
    fn utility_maps_cover_nonempty_groups() {
        let (_, val, _) = tiny_synth(4);
        let spec = ModelSpec::lenet_corner_digits();
        let params = Parameters::init(&spec, 5).unwrap();
        let outcome = class_avg_utility(&spec, &params, &val, 10).unwrap();
        assert!(outcome.skipped_groups.is_empty());
        assert_eq!(outcome.maps.len(), 10);
        let total: usize = outcome.maps.iter().map(|m| m.count).sum();
        assert_eq!(total, val.len());
        for map in &outcome.maps {
            assert!(map.mean_utility.iter().all(|&v| v >= 0.0));
            assert!(map.mean_image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // labels 0–4 appear twice per group (plain and corner class)
        assert!(outcome.maps[0].count >= 2);
    }

    #[test]
    fn empty_groups_are_reported_not_fabricated() {
        let classes = 4;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..8 {
            images.extend(vec![0.3; IMG_PIXELS]);
            labels.push((i % 2) as u8);
        }
        let ds = ImageDataset::new(images, labels, classes, Split::Test).unwrap();
        let spec = ModelSpec::linear_softmax(IMG_PIXELS, classes);
        let params = Parameters::init(&spec, 1).unwrap();
        let outcome = class_avg_utility(&spec, &params, &ds, 4).unwrap();
        assert_eq!(outcome.skipped_groups, vec![2, 3]);
        assert_eq!(outcome.maps.len(), 2);
    }

    #[test]
    fn disconnected_pixel_has_zero_mean_utility_everywhere() {
        let spec = ModelSpec {
            input: vec![IMG_PIXELS],
            embedding: vec![LayerSpec::Dense { out_features: 8 }, LayerSpec::Relu],
            classes: 15,
        };
        let mut params = Parameters::init(&spec, 6).unwrap();
        let cut = 100usize;
        let w = params.get_mut("phi.0.weight").unwrap();
        for row in 0..8 {
            w.data_mut()[row * IMG_PIXELS + cut] = 0.0;
        }
        let (_, val, _) = tiny_synth(6);
        let outcome = class_avg_utility(&spec, &params, &val, 10).unwrap();
        for map in &outcome.maps {
            assert_eq!(map.mean_utility[cut], 0.0, "group {}", map.group);
        }
    }

    #[test]
    fn alignment_is_one_against_its_own_sensitivity() {
        let spec = ModelSpec {
            input: vec![6],
            embedding: vec![LayerSpec::Dense { out_features: 4 }, LayerSpec::Relu],
            classes: 3,
        };
        let params = Parameters::init(&spec, 7).unwrap();
        let images = vec![
            Tensor::vector(vec![0.2, 0.8, 0.5, 0.1, 0.9, 0.4]),
            Tensor::vector(vec![0.7, 0.3, 0.6, 0.2, 0.5, 0.8]),
        ];
        let strengths: Vec<Vec<f64>> = images
            .iter()
            .map(|x| {
                attribution::sensitivity_continuous(&spec, &params, x)
                    .unwrap()
                    .values
                    .into_data()
            })
            .collect();
        let r = sensitivity_alignment(&spec, &params, &images, &strengths, (0.0, 0.0)).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_consuming_band_is_an_error() {
        let spec = ModelSpec::linear_softmax(4, 2);
        let params = Parameters::init(&spec, 0).unwrap();
        let images = vec![Tensor::vector(vec![0.1, 0.2, 0.3, 0.4])];
        let strengths = vec![vec![0.5, 0.5, 0.5, 0.5]];
        assert!(matches!(
            sensitivity_alignment(&spec, &params, &images, &strengths, (0.0, 1.0)),
            Err(EvalError::NoSurvivingFeatures)
        ));
    }

    #[test]
    fn grid_exports_have_the_right_shape() {
        let values: Vec<f64> = (0..IMG_PIXELS).map(|i| i as f64).collect();
        let csv = grid_to_csv(&values, IMG_SIDE);
        assert_eq!(csv.lines().count(), IMG_SIDE);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), IMG_SIDE);

        let pgm = grid_to_pgm(&values, IMG_SIDE);
        let header = format!("P5\n{IMG_SIDE} {IMG_SIDE}\n255\n");
        assert!(pgm.starts_with(header.as_bytes()));
        assert_eq!(pgm.len(), header.len() + IMG_PIXELS);
        assert_eq!(*pgm.last().unwrap(), 255);

        let flat = grid_to_pgm(&vec![0.7; IMG_PIXELS], IMG_SIDE);
        assert!(flat[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn report_serialization_round_trips() {
        let report = EvalReport {
            seed: 9,
            checkpoint: "model.fclckpt".into(),
            datasets: vec![DatasetScore {
                name: "balanced".into(),
                accuracy: 0.5,
                examples: 2,
                per_class: vec![
                    ClassScore { class: 0, correct: 1, total: 1, accuracy: 1.0 },
                    ClassScore { class: 1, correct: 0, total: 1, accuracy: 0.0 },
                ],
            }],
        };
        let parsed: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(parsed, report);
        let csv = report.to_csv();
        assert!(csv.contains("balanced,overall,1,2,0.5"));
        assert!(csv.contains("balanced,class-1,0,1,0"));
    }
}
