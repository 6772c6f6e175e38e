use std::fs;
use std::path::{Path, PathBuf};

use inreg_core::checkpoint;
use inreg_core::field::{warp_volume, Interpolation, Volume};
use inreg_core::io::{self, normalize_intensity};
use inreg_core::metrics::{corner_error, label_scores};
use inreg_core::model::GranularityMode;
use inreg_core::synth::GroundTruthWarp;
use inreg_core::train::{register_pair, Modality, RunConfig};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::config::{apply_set, parse_cli_config, read_config_file, resolve_run, set_value, CliConfig};
use crate::error::{CliError, CliResult};
use crate::output::{
    create_dir, find_image, io_error, load_scalar, pair_dirs, parse_size, print_line, write_atomic,
};
use crate::{DefaultsArgs, ModalityArg, ModeArg, RegisterArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const FIELD_FILE: &str = "displacement.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn mode_value(mode: ModeArg) -> GranularityMode {
    match mode {
        ModeArg::Rigid => GranularityMode::Rigid,
        ModeArg::Deformable => GranularityMode::Deformable,
    }
}

fn modality_value(modality: ModalityArg) -> Modality {
    match modality {
        ModalityArg::Single => Modality::Single,
        ModalityArg::Multi => Modality::Multi,
    }
}

fn path_value(path: &Path) -> Value {
    Value::String(path.to_string_lossy().into_owned())
}

fn build_tree(args: &RegisterArgs) -> CliResult<Value> {
    let mut tree = match &args.config {
        Some(path) => read_config_file(path)?,
        None => Value::Object(Map::new()),
    };
    for (key, path) in [
        ("fixed", &args.fixed),
        ("moving", &args.moving),
        ("out_dir", &args.out_dir),
        ("truth", &args.truth),
    ] {
        if let Some(p) = path {
            set_value(&mut tree, key, path_value(p));
        }
    }
    if let Some(mode) = args.mode {
        set_value(&mut tree, "run.granularity", json!(mode_value(mode)));
    }
    if let Some(modality) = args.modality {
        set_value(&mut tree, "run.modality", json!(modality_value(modality)));
    }
    if let Some(seed) = args.seed {
        set_value(&mut tree, "run.seed", json!(seed));
    }
    for s in &args.sets {
        apply_set(&mut tree, s)?;
    }
    Ok(tree)
}

pub fn run(args: &RegisterArgs, json_out: bool) -> CliResult<()> {
    if args.workers == 0 {
        return Err(CliError::Usage("worker count must be at least 1".into()));
    }
    let tree = build_tree(args)?;
    match &args.batch {
        Some(dir) => run_batch(dir, &tree, args.workers, json_out),
        None => {
            let summary = register_one(&tree)?;
            emit(&summary, json_out);
            Ok(())
        }
    }
}

fn emit(summary: &Value, json_out: bool) {
    if json_out {
        print_line(&serde_json::to_string_pretty(summary).expect("serializable summary"));
    } else {
        let mut line = format!(
            "registered in {:.1}s, final loss {:.3e}",
            summary["runtime_secs"].as_f64().unwrap_or(f64::NAN),
            summary["final_loss"]["total"].as_f64().unwrap_or(f64::NAN)
        );
        if let Some(delta) = summary["corner_delta"].as_f64() {
            line.push_str(&format!(", corner delta {delta:.3}%"));
        }
        if let Some(d) = summary["labels"]["mean_dice"].as_f64() {
            line.push_str(&format!(", mean DSC {d:.3}"));
        }
        eprintln!("{line} -> {}", summary["out_dir"].as_str().unwrap_or(""));
    }
}

fn run_batch(dir: &Path, tree: &Value, workers: usize, json_out: bool) -> CliResult<()> {
    let base = parse_cli_config(tree)?;
    let out_root = base
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Usage("--out-dir is required".into()))?;
    let pairs = pair_dirs(dir)?;
    if pairs.is_empty() {
        return Err(CliError::Io(format!("{}: no pair_* directories", dir.display())));
    }
    let mut jobs = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let name = pair.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut t = tree.clone();
        let fixed = find_image(pair, "fixed")
            .ok_or_else(|| CliError::Io(format!("{}: missing fixed image", pair.display())))?;
        let moving = find_image(pair, "moving")
            .ok_or_else(|| CliError::Io(format!("{}: missing moving image", pair.display())))?;
        set_value(&mut t, "fixed", path_value(&fixed));
        set_value(&mut t, "moving", path_value(&moving));
        set_value(&mut t, "out_dir", path_value(&out_root.join(&name)));
        let truth = pair.join("truth.json");
        if truth.exists() {
            set_value(&mut t, "truth", path_value(&truth));
        }
        if let (Some(fl), Some(ml)) = (find_image(pair, "fixed_labels"), find_image(pair, "moving_labels")) {
            set_value(&mut t, "fixed_labels", path_value(&fl));
            set_value(&mut t, "moving_labels", path_value(&ml));
        }
        jobs.push((name, t));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    let results: Vec<(String, CliResult<Value>)> = pool.install(|| {
        jobs.par_iter()
            .map(|(name, t)| (name.clone(), register_one(t)))
            .collect()
    });

    let mut summaries = Vec::new();
    let mut worst: Option<CliError> = None;
    for (name, r) in results {
        match r {
            Ok(s) => {
                if !json_out {
                    eprint!("{name}: ");
                    emit(&s, false);
                }
                summaries.push(s);
            }
            Err(e) => {
                eprintln!("{name}: {e}");
                if worst.as_ref().is_none_or(|w| e.code() > w.code()) {
                    worst = Some(e);
                }
            }
        }
    }
    if json_out {
        print_line(&serde_json::to_string_pretty(&summaries).expect("serializable"));
    }
    match worst {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn required(value: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    value
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{flag} is required")))
}

/// One registration: loads inputs, optimizes and writes all artifacts.
/// Nothing is written unless the optimization finishes.
pub fn register_one(tree: &Value) -> CliResult<Value> {
    let config = parse_cli_config(tree)?;
    let fixed_path = required(&config.fixed, "--fixed")?;
    let moving_path = required(&config.moving, "--moving")?;
    let out_dir = required(&config.out_dir, "--out-dir")?;
    if !(config.threshold > 0.0) {
        return Err(CliError::Usage("threshold must be positive".into()));
    }

    let mut fixed = load_scalar(&fixed_path, config.fixed_channel)?;
    let mut moving = load_scalar(&moving_path, config.moving_channel)?;
    if fixed.geometry.extents != moving.geometry.extents {
        return Err(CliError::Usage(format!(
            "fixed extents {:?} differ from moving extents {:?}",
            fixed.geometry.extents, moving.geometry.extents
        )));
    }
    if config.normalize {
        fixed = normalize_intensity(&fixed);
        moving = normalize_intensity(&moving);
    }
    let truth = match &config.truth {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            Some(GroundTruthWarp::from_json(&text)?)
        }
        None => None,
    };
    let labels = match (&config.fixed_labels, &config.moving_labels) {
        (Some(f), Some(m)) => Some((io::load_labels(f)?, io::load_labels(m)?)),
        (None, None) => None,
        _ => {
            return Err(CliError::Usage(
                "fixed_labels and moving_labels must be given together".into(),
            ))
        }
    };

    let extents = fixed.geometry.extents.clone();
    if let Some(warp) = &truth {
        if warp.geometry.extents != extents {
            return Err(CliError::Usage(format!(
                "truth geometry {:?} differs from image extents {:?}",
                warp.geometry.extents, extents
            )));
        }
    }
    if let Some((f, m)) = &labels {
        if f.geometry.extents != extents || m.geometry.extents != extents {
            return Err(CliError::Usage("label maps must match the image extents".into()));
        }
    }
    let run = resolve_run(&extents, &config.run)?;
    let result = register_pair(&fixed, &moving, &run)?;

    let mut summary = Map::new();
    summary.insert("fixed".into(), path_value(&fixed_path));
    summary.insert("moving".into(), path_value(&moving_path));
    summary.insert("out_dir".into(), path_value(&out_dir));
    summary.insert("extents".into(), json!(extents));
    summary.insert("epochs_executed".into(), json!(result.epochs_executed));
    let last = result.history.last();
    summary.insert(
        "final_loss".into(),
        json!({
            "fixed": last.map(|h| h.fixed),
            "transformed": last.map(|h| h.transformed),
            "total": last.map(|h| h.total),
        }),
    );
    summary.insert("runtime_secs".into(), json!(result.wall_time_secs));
    let mut mags = result.displacement.magnitudes();
    mags.sort_by(f64::total_cmp);
    summary.insert("median_displacement_px".into(), json!(mags[mags.len() / 2]));
    summary.insert("max_displacement_px".into(), json!(mags.last().copied()));
    if let Some(warp) = &truth {
        if extents.len() == 2 {
            let delta = corner_error(&result.displacement, warp);
            summary.insert("corner_delta".into(), json!(delta));
            summary.insert("threshold".into(), json!(config.threshold));
            summary.insert("success".into(), json!(delta < config.threshold));
        }
    }
    if let Some((fixed_labels, moving_labels)) = &labels {
        let warped = match warp_volume(
            &Volume::Label(fixed_labels.clone()),
            &result.displacement,
            Interpolation::Nearest,
        )? {
            Volume::Label(l) => l,
            Volume::Scalar(_) => unreachable!("label input gives label output"),
        };
        let scores = label_scores(&warped, moving_labels)?;
        let baseline = label_scores(fixed_labels, moving_labels)?;
        summary.insert(
            "labels".into(),
            json!({
                "mean_dice": scores.mean_dice,
                "weighted_dice": scores.weighted_dice,
                "mean_hd95": finite(scores.mean_hd95),
                "identity_mean_dice": baseline.mean_dice,
            }),
        );
    }
    let mut echo = serde_json::to_value(&config).expect("serializable config");
    echo["run"] = serde_json::to_value(&run).expect("serializable run config");
    summary.insert("config".into(), echo);
    let summary = Value::Object(summary);

    create_dir(&out_dir)?;
    write_atomic(&out_dir.join(CHECKPOINT_FILE), &checkpoint::to_bytes(&result.model))?;
    write_atomic(&out_dir.join(FIELD_FILE), &io::displacement_to_bytes(&result.displacement))?;
    write_atomic(&out_dir.join(LOSS_FILE), result.loss_csv().as_bytes())?;
    let text = serde_json::to_string_pretty(&summary).expect("serializable summary");
    write_atomic(&out_dir.join(SUMMARY_FILE), text.as_bytes())?;
    Ok(summary)
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Fully resolved configuration for a run on the given size.
pub fn print_defaults(args: &DefaultsArgs) -> CliResult<()> {
    let extents = parse_size(&args.size)?;
    let run = RunConfig::defaults(&extents, mode_value(args.mode), modality_value(args.modality));
    let mut tree = serde_json::to_value(CliConfig::default()).expect("serializable");
    tree["run"] = serde_json::to_value(&run).expect("serializable");
    print_line(&serde_json::to_string_pretty(&tree).expect("serializable"));
    Ok(())
}
