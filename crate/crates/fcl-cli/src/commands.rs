//! The five subcommand implementations. Every command validates its config
//! before touching the output directory, writes bitwise-reproducible
//! artifacts, and keeps timestamps confined to `run-info.json`.

use crate::config::ExperimentConfig;
use crate::CliError;
use fcl_core::dataset::{
    self, DatasetMeta, ImageDataset, Split, IMG_SIDE,
};
use fcl_core::evaluation::{self, EvalReport};
use fcl_core::model::{ModelError, ModelSpec, Parameters};
use fcl_core::attribution;
use fcl_core::trainer::{self, TrainError};
use std::path::{Path, PathBuf};

const NOISE_FRACTION: f64 = 0.15;

// ---------------------------------------------------------------------------
// Error mapping

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn checkpoint_err(e: ModelError) -> CliError {
    match e {
        ModelError::Invalid(m) => CliError::Config(m),
        other => CliError::Data(other.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn unix_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    write_file(path, serde_json::to_string_pretty(value).expect("serializable").as_bytes())
}

fn split_paths(data_dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (data_dir.join(format!("{name}-images.idx")), data_dir.join(format!("{name}-labels.idx")))
}

fn load_split(data_dir: &Path, name: &str, split: Split) -> Result<ImageDataset, CliError> {
    let (images, labels) = split_paths(data_dir, name);
    if !images.exists() || !labels.exists() {
        return Err(CliError::Data(format!(
            "dataset files {} / {} not found; run `fcl synth` first",
            images.display(),
            labels.display()
        )));
    }
    dataset::load_idx(&images, &labels, split).map_err(data_err)
}

fn save_split(ds: &ImageDataset, data_dir: &Path, name: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(data_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", data_dir.display())))?;
    let (images, labels) = split_paths(data_dir, name);
    dataset::save_idx(ds, &images, &labels).map_err(data_err)
}

/// Loaded parameters must cover exactly the tensors the configured model
/// expects, with matching shapes.
fn check_model_compat(spec: &ModelSpec, params: &Parameters) -> Result<(), CliError> {
    let reference = Parameters::init(spec, 0).map_err(checkpoint_err)?;
    for (name, tensor) in reference.entries() {
        match params.get(name) {
            None => {
                return Err(CliError::Data(format!(
                    "checkpoint does not match the configured model: missing tensor {name}"
                )))
            }
            Some(t) if t.dims() != tensor.dims() => {
                return Err(CliError::Data(format!(
                    "checkpoint does not match the configured model: {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    tensor.dims()
                )))
            }
            Some(_) => {}
        }
    }
    if params.len() != reference.len() {
        return Err(CliError::Data(format!(
            "checkpoint does not match the configured model: {} tensors, expected {}",
            params.len(),
            reference.len()
        )));
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// synth

pub fn cmd_synth(config: &ExperimentConfig) -> Result<(), CliError> {
    let started = unix_now();
    let data_dir = config.resolve_data_dir();

    // A 10-class source corpus from IDX files when present, otherwise the
    // procedural glyph generator. Pool sizing gives every split headroom:
    // the train pool holds 60% of each digit's images.
    let (source_images, source_labels) = split_paths(&data_dir, "source");
    let base = if source_images.exists() && source_labels.exists() {
        dataset::load_idx(&source_images, &source_labels, Split::Train).map_err(data_err)?
    } else {
        let needed = config.synth.train_per_base + config.synth.train_per_rare;
        let per_digit = ((needed as f64 / 0.6).ceil() as usize).max(60);
        dataset::generate_base(per_digit, config.synth.seed).map_err(data_err)?
    };

    let (train, val, test) = dataset::synthesize(&base, &config.synth).map_err(data_err)?;

    for (name, ds) in [("train", &train), ("val", &val), ("test", &test)] {
        save_split(ds, &data_dir, name)?;
        let meta = DatasetMeta::describe(ds, &config.synth);
        write_file(
            &data_dir.join(format!("{name}-meta.json")),
            serde_json::to_string_pretty(&meta).expect("meta serializes").as_bytes(),
        )?;
        println!("{name} histogram: {:?}", ds.histogram());
    }

    write_json(
        &data_dir.join("run-info.json"),
        &serde_json::json!({
            "command": "synth",
            "started-unix": started,
            "finished-unix": unix_now(),
            "seed": config.synth.seed,
        }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train

struct SeedOutcome {
    seed: u64,
    final_epoch: Option<fcl_core::trainer::EpochRecord>,
    error: Option<String>,
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<(), CliError> {
    let started = unix_now();
    let data_dir = config.resolve_data_dir();
    let train_set = load_split(&data_dir, "train", Split::Train)?;
    let val_set = load_split(&data_dir, "val", Split::Val)?;

    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", config.out_dir.display())))?;
    write_file(&config.out_dir.join("effective-config.json"), config.to_pretty_json().as_bytes())?;

    let mut outcomes = Vec::new();
    for &seed in &config.seeds {
        let seed_started = unix_now();
        let mut train_config = config.train.clone();
        train_config.seed = seed;
        let seed_dir = config.out_dir.join(format!("seed-{seed}"));

        let result = trainer::train_tuned(
            &train_config,
            &config.model,
            &train_set,
            &val_set,
            config.drop_threshold(),
        );
        match result {
            Ok((params, log)) => {
                std::fs::create_dir_all(&seed_dir).map_err(|e| {
                    CliError::Data(format!("cannot create {}: {e}", seed_dir.display()))
                })?;
                params.save_checkpoint(&seed_dir.join("model.fclckpt")).map_err(checkpoint_err)?;
                write_file(&seed_dir.join("train-log.csv"), log.to_csv().as_bytes())?;
                write_file(&seed_dir.join("train-log.json"), log.to_json().as_bytes())?;
                let wall_times: Vec<f64> = log.epochs.iter().map(|r| r.wall_time_s).collect();
                write_json(
                    &seed_dir.join("run-info.json"),
                    &serde_json::json!({
                        "command": "train",
                        "seed": seed,
                        "method": config.train.method.as_str(),
                        "started-unix": seed_started,
                        "finished-unix": unix_now(),
                        "epoch-wall-times-s": wall_times,
                    }),
                )?;
                let last = log.epochs.last().cloned();
                println!(
                    "seed {seed}: val accuracy {:.4}",
                    last.as_ref().map(|r| r.val_accuracy).unwrap_or(f64::NAN)
                );
                outcomes.push(SeedOutcome { seed, final_epoch: last, error: None });
            }
            Err(e @ TrainError::Invalid(_)) => {
                // a config problem fails every seed identically: abort
                return Err(CliError::Config(e.to_string()));
            }
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                outcomes.push(SeedOutcome { seed, final_epoch: None, error: Some(e.to_string()) });
            }
        }
    }

    write_sweep_summary(config, &outcomes, started)?;

    let failures: Vec<&SeedOutcome> = outcomes.iter().filter(|o| o.error.is_some()).collect();
    if !failures.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} of {} seeds failed: {}",
            failures.len(),
            outcomes.len(),
            failures
                .iter()
                .map(|o| format!("seed {} ({})", o.seed, o.error.as_deref().unwrap_or("?")))
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    Ok(())
}

fn write_sweep_summary(
    config: &ExperimentConfig,
    outcomes: &[SeedOutcome],
    started: f64,
) -> Result<(), CliError> {
    let mut seeds_csv = String::from(
        "seed,status,val-accuracy,train-accuracy,classification-loss,fcl-loss\n",
    );
    for o in outcomes {
        match &o.final_epoch {
            Some(r) => seeds_csv.push_str(&format!(
                "{},ok,{},{},{},{}\n",
                o.seed,
                r.val_accuracy,
                r.train_accuracy,
                r.mean_classification_loss,
                r.mean_fcl_loss
            )),
            None => seeds_csv.push_str(&format!("{},failed,,,,\n", o.seed)),
        }
    }
    write_file(&config.out_dir.join("seeds.csv"), seeds_csv.as_bytes())?;

    let finished: Vec<&fcl_core::trainer::EpochRecord> =
        outcomes.iter().filter_map(|o| o.final_epoch.as_ref()).collect();
    let mut summary = String::from("metric,mean,std,seeds\n");
    if !finished.is_empty() {
        let columns: [(&str, fn(&fcl_core::trainer::EpochRecord) -> f64); 4] = [
            ("final-val-accuracy", |r| r.val_accuracy),
            ("final-train-accuracy", |r| r.train_accuracy),
            ("final-classification-loss", |r| r.mean_classification_loss),
            ("final-fcl-loss", |r| r.mean_fcl_loss),
        ];
        for (name, extract) in columns {
            let values: Vec<f64> = finished.iter().map(|r| extract(r)).collect();
            let (mean, std) = mean_std(&values);
            summary.push_str(&format!("{name},{mean},{std},{}\n", values.len()));
        }
    }
    write_file(&config.out_dir.join("summary.csv"), summary.as_bytes())?;
    print!("{summary}");

    write_json(
        &config.out_dir.join("run-info.json"),
        &serde_json::json!({
            "command": "train",
            "started-unix": started,
            "finished-unix": unix_now(),
            "seeds": config.seeds,
            "failed": outcomes
                .iter()
                .filter(|o| o.error.is_some())
                .map(|o| serde_json::json!({"seed": o.seed, "error": o.error}))
                .collect::<Vec<_>>(),
        }),
    )
}

// ---------------------------------------------------------------------------
// eval

pub fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint: &Path,
    noise_seed: u64,
) -> Result<(), CliError> {
    let started = unix_now();
    let params = Parameters::load_checkpoint(checkpoint).map_err(checkpoint_err)?;
    check_model_compat(&config.model, &params)?;

    let data_dir = config.resolve_data_dir();
    let test = load_split(&data_dir, "test", Split::Test)?;
    let train = load_split(&data_dir, "train", Split::Train)?;
    let std_map = dataset::pixel_std(&train).map_err(data_err)?;

    let uniform = dataset::noise_uniform(&test, NOISE_FRACTION, noise_seed).map_err(data_err)?;
    let nonuniform = dataset::noise_nonuniform(&test, &std_map, NOISE_FRACTION, noise_seed)
        .map_err(data_err)?;

    let score = |ds: &ImageDataset, name: &str| {
        evaluation::accuracy(&config.model, &params, ds, name).map_err(|e| match e {
            evaluation::EvalError::Invalid(m) => CliError::Data(m),
            other => runtime_err(other),
        })
    };
    let report = EvalReport {
        seed: noise_seed,
        checkpoint: checkpoint.display().to_string(),
        datasets: vec![
            score(&test, "BAL")?,
            score(&uniform, "BAL+UN")?,
            score(&nonuniform, "BAL+NUN")?,
        ],
    };

    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", config.out_dir.display())))?;
    write_file(&config.out_dir.join("eval-report.json"), report.to_json().as_bytes())?;
    write_file(&config.out_dir.join("eval-report.csv"), report.to_csv().as_bytes())?;
    for ds in &report.datasets {
        println!("{}: {:.4}", ds.name, ds.accuracy);
    }
    write_json(
        &config.out_dir.join("run-info.json"),
        &serde_json::json!({
            "command": "eval",
            "started-unix": started,
            "finished-unix": unix_now(),
            "checkpoint": report.checkpoint,
            "noise-seed": noise_seed,
        }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// probe

pub fn cmd_probe(
    config: &ExperimentConfig,
    checkpoint: &Path,
    examples: &[usize],
    groups: bool,
) -> Result<(), CliError> {
    if examples.is_empty() && !groups {
        return Err(CliError::Config(
            "empty selection: pass --example <index> (repeatable) and/or --groups".into(),
        ));
    }
    let started = unix_now();
    let params = Parameters::load_checkpoint(checkpoint).map_err(checkpoint_err)?;
    check_model_compat(&config.model, &params)?;
    let data_dir = config.resolve_data_dir();
    let test = load_split(&data_dir, "test", Split::Test)?;
    let probe_dir = config.out_dir.join("probe");

    for &i in examples {
        if i >= test.len() {
            return Err(CliError::Data(format!(
                "example index {i} out of range for {} test examples",
                test.len()
            )));
        }
        let x = test.image_tensor(i);
        let label = test.label(i);
        let utility = attribution::utility_continuous(&config.model, &params, &x, label)
            .map_err(runtime_err)?;
        let sensitivity = attribution::sensitivity_continuous(&config.model, &params, &x)
            .map_err(runtime_err)?;
        write_grid(&probe_dir, &format!("example-{i}-utility"), utility.values.data())?;
        write_grid(&probe_dir, &format!("example-{i}-sensitivity"), sensitivity.values.data())?;
    }

    if groups {
        let outcome = evaluation::class_avg_utility(&config.model, &params, &test, 10)
            .map_err(runtime_err)?;
        for g in &outcome.skipped_groups {
            println!("group {g}: no examples; skipped");
        }
        let window = IMG_SIDE / config.synth.corner_scale;
        let mut low = (0.0, 0usize); // center digit 0-4: weighted corner utility
        let mut high = (0.0, 0usize); // center digit 5-9
        for map in &outcome.maps {
            write_grid(&probe_dir, &format!("group-{}-image", map.group), &map.mean_image)?;
            write_grid(&probe_dir, &format!("group-{}-utility", map.group), &map.mean_utility)?;
            let corner = evaluation::corner_window_mean(&map.mean_utility, window);
            let slot = if map.group < 5 { &mut low } else { &mut high };
            slot.0 += corner * map.count as f64;
            slot.1 += map.count;
        }
        if low.1 > 0 && high.1 > 0 {
            let low_mean = low.0 / low.1 as f64;
            let high_mean = high.0 / high.1 as f64;
            let contrast = low_mean / high_mean;
            println!("corner-utility-contrast: {contrast}");
            write_json(
                &probe_dir.join("corner-contrast.json"),
                &serde_json::json!({
                    "window": window,
                    "center-0-4-mean-corner-utility": low_mean,
                    "center-5-9-mean-corner-utility": high_mean,
                    "contrast": contrast,
                }),
            )?;
        }
    }

    write_json(
        &config.out_dir.join("run-info.json"),
        &serde_json::json!({
            "command": "probe",
            "started-unix": started,
            "finished-unix": unix_now(),
            "checkpoint": checkpoint.display().to_string(),
            "examples": examples,
            "groups": groups,
        }),
    )?;
    Ok(())
}

fn write_grid(dir: &Path, stem: &str, values: &[f64]) -> Result<(), CliError> {
    write_file(
        &dir.join(format!("{stem}.csv")),
        evaluation::grid_to_csv(values, IMG_SIDE).as_bytes(),
    )?;
    write_file(&dir.join(format!("{stem}.pgm")), &evaluation::grid_to_pgm(values, IMG_SIDE))
}

// ---------------------------------------------------------------------------
// noise

pub fn cmd_noise(config: &ExperimentConfig, frac: f64, seed: u64) -> Result<(), CliError> {
    let started = unix_now();
    let data_dir = config.resolve_data_dir();
    let test = load_split(&data_dir, "test", Split::Test)?;
    let train = load_split(&data_dir, "train", Split::Train)?;
    let std_map = dataset::pixel_std(&train).map_err(data_err)?;

    let uniform = dataset::noise_uniform(&test, frac, seed).map_err(|e| match e {
        dataset::DatasetError::Invalid(m) => CliError::Config(m),
        other => data_err(other),
    })?;
    let nonuniform =
        dataset::noise_nonuniform(&test, &std_map, frac, seed).map_err(data_err)?;

    save_split(&uniform, &data_dir, "test-un")?;
    save_split(&nonuniform, &data_dir, "test-nun")?;
    println!(
        "replaced {} of {} pixels per image (frac {frac})",
        dataset::replaced_pixel_count(frac),
        fcl_core::dataset::IMG_PIXELS
    );

    write_json(
        &data_dir.join("noise-run-info.json"),
        &serde_json::json!({
            "command": "noise",
            "started-unix": started,
            "finished-unix": unix_now(),
            "frac": frac,
            "seed": seed,
        }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_handles_single_and_multiple_values() {
        let (m, s) = mean_std(&[0.5]);
        assert_eq!((m, s), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn model_compat_rejects_shape_and_name_mismatches() {
        let spec = ModelSpec::lenet_corner_digits();
        let params = Parameters::init(&spec, 0).unwrap();
        check_model_compat(&spec, &params).unwrap();

        let other = ModelSpec::linear_softmax(784, 15);
        let other_params = Parameters::init(&other, 0).unwrap();
        assert!(matches!(check_model_compat(&spec, &other_params), Err(CliError::Data(_))));
    }
}
