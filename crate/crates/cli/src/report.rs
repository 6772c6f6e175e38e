use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use inreg_core::checkpoint;
use inreg_core::field::{warp_volume, Geometry, Interpolation, ScalarField, Volume};
use inreg_core::io::{normalize_intensity, save_rgb_png};
use serde_json::json;

use crate::config::{parse_cli_config, CliConfig};
use crate::error::{CliError, CliResult};
use crate::output::{create_dir, io_error, load_scalar, print_line, write_atomic};
use crate::register::{CHECKPOINT_FILE, LOSS_FILE, SUMMARY_FILE};
use crate::ReportArgs;

const SVG_WIDTH: f64 = 640.0;
const SVG_HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn artifact(dir: &Path, name: &str) -> CliResult<PathBuf> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Io(format!("{}: missing run artifact", path.display())))
    }
}

/// `(epoch, total)` rows of a loss CSV.
fn read_losses(path: &Path) -> CliResult<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |s: Option<&&str>| s.and_then(|v| v.trim().parse::<f64>().ok());
        match (parse(cols.first()), parse(cols.get(3))) {
            (Some(e), Some(t)) => rows.push((e, t)),
            _ => return Err(CliError::Io(format!("{}: malformed line {}", path.display(), i + 1))),
        }
    }
    if rows.is_empty() {
        return Err(CliError::Io(format!("{}: no loss rows", path.display())));
    }
    Ok(rows)
}

/// Loss curve on a log axis; one polyline vertex per epoch.
pub fn loss_svg(rows: &[(f64, f64)]) -> String {
    let ys: Vec<f64> = rows.iter().map(|&(_, t)| t.max(1e-300).log10()).collect();
    let (lo, hi) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let first = rows[0].0;
    let last = rows[rows.len() - 1].0;
    let xspan = if last > first { last - first } else { 1.0 };
    let pw = SVG_WIDTH - 2.0 * MARGIN;
    let ph = SVG_HEIGHT - 2.0 * MARGIN;

    let mut points = String::new();
    for (&(e, _), &y) in rows.iter().zip(&ys) {
        let px = MARGIN + (e - first) / xspan * pw;
        let py = MARGIN + (hi - y) / span * ph;
        if !points.is_empty() {
            points.push(' ');
        }
        let _ = write!(points, "{px:.2},{py:.2}");
    }
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{MARGIN} {MARGIN} V{} H{}" fill="none" stroke="black"/>"#,
        SVG_HEIGHT - MARGIN,
        SVG_WIDTH - MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">epoch</text>"#,
        SVG_WIDTH / 2.0,
        SVG_HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="{}" font-size="12">log10 loss: {hi:.2} (top) to {lo:.2} (bottom)</text>"#,
        MARGIN - 15.0
    );
    let _ = writeln!(svg, r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{points}"/>"#);
    svg.push_str("</svg>\n");
    svg
}

/// Central slice along axis 0 of a 3D field; 2D fields pass through.
fn display_slice(field: &ScalarField) -> ScalarField {
    let e = &field.geometry.extents;
    if e.len() == 2 {
        return field.clone();
    }
    let mid = e[0] / 2;
    let plane = e[1] * e[2];
    ScalarField {
        geometry: Geometry::new(vec![e[1], e[2]]),
        values: field.values[mid * plane..(mid + 1) * plane].to_vec(),
    }
}

pub fn checkerboard(a: &ScalarField, b: &ScalarField) -> Vec<[f64; 3]> {
    let e = &a.geometry.extents;
    let tile = (e.iter().copied().max().unwrap_or(8) / 8).max(2);
    (0..a.values.len())
        .map(|flat| {
            let (i, j) = (flat / e[1], flat % e[1]);
            let v = if (i / tile + j / tile) % 2 == 0 {
                a.values[flat]
            } else {
                b.values[flat]
            };
            [v, v, v]
        })
        .collect()
}

/// Transformed image in red, warped fixed reconstruction in green.
pub fn overlay(reconstruction: &ScalarField, transformed: &ScalarField) -> Vec<[f64; 3]> {
    transformed
        .values
        .iter()
        .zip(&reconstruction.values)
        .map(|(&r, &g)| [r, g, 0.0])
        .collect()
}

fn load_inputs(config: &CliConfig) -> CliResult<(ScalarField, ScalarField)> {
    let missing = || CliError::Io("summary does not name the input images".into());
    let fixed_path = config.fixed.clone().ok_or_else(missing)?;
    let moving_path = config.moving.clone().ok_or_else(missing)?;
    let mut fixed = load_scalar(&fixed_path, config.fixed_channel)?;
    let mut moving = load_scalar(&moving_path, config.moving_channel)?;
    if config.normalize {
        fixed = normalize_intensity(&fixed);
        moving = normalize_intensity(&moving);
    }
    Ok((fixed, moving))
}

pub fn run(args: &ReportArgs, json_out: bool) -> CliResult<()> {
    let summary_path = artifact(&args.run_dir, SUMMARY_FILE)?;
    let ckpt_path = artifact(&args.run_dir, CHECKPOINT_FILE)?;
    let loss_path = artifact(&args.run_dir, LOSS_FILE)?;

    let text = fs::read_to_string(&summary_path).map_err(|e| io_error(&summary_path, e))?;
    let summary: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", summary_path.display())))?;
    let config = parse_cli_config(&summary["config"])
        .map_err(|e| CliError::Io(format!("{}: {e}", summary_path.display())))?;
    let model = checkpoint::load(&ckpt_path)?;
    let rows = read_losses(&loss_path)?;
    let (fixed, moving) = load_inputs(&config)?;
    if fixed.geometry.extents != model.extents {
        return Err(CliError::Usage(format!(
            "checkpoint extents {:?} differ from input extents {:?}",
            model.extents, fixed.geometry.extents
        )));
    }

    let field = model.export_displacement_field(&model.extents);
    let warped = match warp_volume(&Volume::Scalar(fixed), &field, Interpolation::Linear)? {
        Volume::Scalar(f) => f,
        Volume::Label(_) => unreachable!("scalar input gives scalar output"),
    };
    let reconstruction = model.warped_fixed_reconstruction();

    let warped = display_slice(&warped);
    let moving = display_slice(&moving);
    let reconstruction = display_slice(&reconstruction);

    let out = args.out.clone().unwrap_or_else(|| args.run_dir.join("report"));
    create_dir(&out)?;
    write_atomic(&out.join("loss.svg"), loss_svg(&rows).as_bytes())?;
    let png = |name: &str, rgb: &[[f64; 3]]| -> CliResult<()> {
        let path = out.join(name);
        let tmp = out.join(format!("{name}.partial.png"));
        save_rgb_png(&tmp, &moving.geometry, rgb)?;
        fs::rename(&tmp, &path).map_err(|e| io_error(&path, e))
    };
    png("checkerboard.png", &checkerboard(&warped, &moving))?;
    png("overlay.png", &overlay(&reconstruction, &moving))?;
    if json_out {
        let paths = json!({
            "loss_curve": out.join("loss.svg").to_string_lossy(),
            "checkerboard": out.join("checkerboard.png").to_string_lossy(),
            "overlay": out.join("overlay.png").to_string_lossy(),
            "epochs": rows.len(),
        });
        print_line(&paths.to_string());
    } else {
        eprintln!("report written to {}", out.display());
    }
    Ok(())
}
