use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use inreg_core::field::{warp_volume, Interpolation, Volume};
use inreg_core::io;
use inreg_core::metrics::{corner_error, label_scores, EvalReport, PairMetrics};
use inreg_core::synth::GroundTruthWarp;

use crate::error::{CliError, CliResult};
use crate::output::{create_dir, find_image, io_error, pair_dirs, print_line, write_atomic};
use crate::register::FIELD_FILE;
use crate::{EvalArgs, ProtocolArg};

fn names(dirs: &[std::path::PathBuf]) -> Vec<String> {
    dirs.iter()
        .map(|d| d.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect()
}

fn corner_metrics(result: &Path, truth: &Path) -> CliResult<BTreeMap<String, f64>> {
    let field = io::load_displacement(result.join(FIELD_FILE))?;
    let truth_path = truth.join("truth.json");
    let text = fs::read_to_string(&truth_path).map_err(|e| io_error(&truth_path, e))?;
    let warp = GroundTruthWarp::from_json(&text)?;
    if warp.geometry.extents != field.extents {
        return Err(CliError::Usage(format!(
            "{}: field extents {:?} differ from truth extents {:?}",
            result.display(),
            field.extents,
            warp.geometry.extents
        )));
    }
    if field.dim() != 2 {
        return Err(CliError::Usage("the corner protocol is defined for 2D pairs".into()));
    }
    Ok(BTreeMap::from([("corner_delta".to_string(), corner_error(&field, &warp))]))
}

fn label_metrics(result: &Path, truth: &Path) -> CliResult<BTreeMap<String, f64>> {
    let field = io::load_displacement(result.join(FIELD_FILE))?;
    let find = |stem: &str| {
        find_image(truth, stem)
            .ok_or_else(|| CliError::Io(format!("{}: missing {stem} image", truth.display())))
    };
    let fixed = io::load_labels(find("fixed_labels")?)?;
    let moving = io::load_labels(find("moving_labels")?)?;
    let warped = match warp_volume(&Volume::Label(fixed.clone()), &field, Interpolation::Nearest)? {
        Volume::Label(l) => l,
        Volume::Scalar(_) => unreachable!("label input gives label output"),
    };
    let scores = label_scores(&warped, &moving)?;
    let baseline = label_scores(&fixed, &moving)?;
    Ok(BTreeMap::from([
        ("dice".to_string(), scores.mean_dice),
        ("weighted_dice".to_string(), scores.weighted_dice),
        ("hd95".to_string(), scores.mean_hd95),
        ("identity_dice".to_string(), baseline.mean_dice),
    ]))
}

pub fn run(args: &EvalArgs, json_out: bool) -> CliResult<()> {
    if !(args.threshold > 0.0) {
        return Err(CliError::Usage("threshold must be positive".into()));
    }
    let results = pair_dirs(&args.results_dir)?;
    let truths = pair_dirs(&args.truth_dir)?;
    if results.len() != truths.len() {
        return Err(CliError::Usage(format!(
            "pair count mismatch: {} result(s) in {}, {} truth pair(s) in {}",
            results.len(),
            args.results_dir.display(),
            truths.len(),
            args.truth_dir.display()
        )));
    }
    if results.is_empty() {
        return Err(CliError::Io(format!("{}: no pair_* directories", args.results_dir.display())));
    }
    if names(&results) != names(&truths) {
        return Err(CliError::Usage("result and truth pair names differ".into()));
    }

    let mut pairs = Vec::with_capacity(results.len());
    for (name, (r, t)) in names(&results).into_iter().zip(results.iter().zip(&truths)) {
        let values = match args.protocol {
            ProtocolArg::Corner => corner_metrics(r, t)?,
            ProtocolArg::Labels => label_metrics(r, t)?,
        };
        pairs.push(PairMetrics { name, values });
    }
    let success = match args.protocol {
        ProtocolArg::Corner => Some(("corner_delta", args.threshold)),
        ProtocolArg::Labels => None,
    };
    let report = EvalReport::new(pairs, success)?;

    let out_dir = args.out_dir.clone().unwrap_or_else(|| args.results_dir.clone());
    create_dir(&out_dir)?;
    let aggregate = report.aggregate_json()?;
    write_atomic(&out_dir.join("eval.csv"), report.to_csv().as_bytes())?;
    write_atomic(&out_dir.join("eval.json"), aggregate.as_bytes())?;
    if json_out {
        print_line(&aggregate.to_string());
    } else {
        match report.success_rate {
            Some(rate) => eprintln!("{} pair(s), success rate {rate:.2}", report.pairs.len()),
            None => eprintln!("{} pair(s) evaluated", report.pairs.len()),
        }
    }
    Ok(())
}
