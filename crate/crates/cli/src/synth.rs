use std::fs;

use inreg_core::field::{Geometry, Volume};
use inreg_core::synth::{
    ellipsoid_labels, generate_pair, warp_labels, GroundTruthWarp, PairModality, RbfBump, WarpKind,
};
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::output::{create_dir, image_name, io_error, parse_size, print_line, save_volume_atomic, write_atomic};
use crate::{ModalityArg, SynthArgs};

fn read_bumps(path: &std::path::Path) -> CliResult<Vec<RbfBump>> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let list = match value {
        Value::Object(mut o) if o.contains_key("bumps") && o.len() == 1 => o.remove("bumps").unwrap(),
        other => other,
    };
    serde_json::from_value(list).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn run(args: &SynthArgs, json_out: bool) -> CliResult<()> {
    let extents = parse_size(&args.size)?;
    let geometry = Geometry::new(extents);
    if args.count == 0 {
        return Err(CliError::Usage("count must be at least 1".into()));
    }
    let bumps = match &args.rbf {
        Some(p) => Some(read_bumps(p)?),
        None => None,
    };
    if args.level.is_none() && bumps.is_none() {
        return Err(CliError::Usage("one of --level or --rbf is required".into()));
    }
    let modality = match args.modality {
        ModalityArg::Single => PairModality::Same,
        ModalityArg::Multi => PairModality::Remap,
    };
    create_dir(&args.out_dir)?;

    let mut written = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let seed = args.seed.wrapping_add(i as u64);
        let warp = match (&args.level, &bumps) {
            (Some(level), _) => GroundTruthWarp::rigid_level(*level, geometry.clone(), seed)?,
            (None, Some(bumps)) => {
                let warp = GroundTruthWarp {
                    kind: WarpKind::Rbf { bumps: bumps.clone() },
                    geometry: geometry.clone(),
                };
                warp.validate()?;
                warp
            }
            (None, None) => unreachable!("checked above"),
        };
        let (fixed, moving) = generate_pair(&warp, seed, modality, args.noise)?;

        let dir = args.out_dir.join(format!("pair_{i:04}"));
        create_dir(&dir)?;
        save_volume_atomic(&dir.join(image_name("fixed", &geometry)), &Volume::Scalar(fixed))?;
        save_volume_atomic(&dir.join(image_name("moving", &geometry)), &Volume::Scalar(moving))?;
        if args.labels > 0 {
            let fixed_labels = ellipsoid_labels(&geometry, seed, args.labels);
            let moving_labels = warp_labels(&fixed_labels, &warp);
            save_volume_atomic(
                &dir.join(image_name("fixed_labels", &geometry)),
                &Volume::Label(fixed_labels),
            )?;
            save_volume_atomic(
                &dir.join(image_name("moving_labels", &geometry)),
                &Volume::Label(moving_labels),
            )?;
        }
        write_atomic(&dir.join("truth.json"), warp.to_json()?.as_bytes())?;
        written.push(dir.to_string_lossy().into_owned());
    }
    if json_out {
        print_line(&json!({ "pairs": written }).to_string());
    } else {
        eprintln!("wrote {} pair(s) to {}", written.len(), args.out_dir.display());
    }
    Ok(())
}
