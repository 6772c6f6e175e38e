use inreg_core::checkpoint;
use inreg_core::field::{warp_volume, Interpolation, Volume};
use inreg_core::io;
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::output::{print_line, save_volume_atomic};
use crate::{InterpArg, WarpArgs};

pub fn run(args: &WarpArgs, json_out: bool) -> CliResult<()> {
    let volume = if args.labels {
        Volume::Label(io::load_labels(&args.input)?)
    } else {
        io::load_volume(&args.input)?
    };
    let interpolation = match (args.interp, &volume) {
        (Some(InterpArg::Linear), _) => Interpolation::Linear,
        (Some(InterpArg::Nearest), _) | (None, Volume::Label(_)) => Interpolation::Nearest,
        (None, Volume::Scalar(_)) => Interpolation::Linear,
    };
    if interpolation == Interpolation::Linear && matches!(volume, Volume::Label(_)) {
        return Err(CliError::Usage("label maps can only be warped with nearest interpolation".into()));
    }
    let warped = match (&args.field, &args.checkpoint) {
        (Some(field), _) => {
            let field = io::load_displacement(field)?;
            if field.extents != volume.geometry().extents {
                return Err(CliError::Usage(format!(
                    "field extents {:?} differ from input extents {:?}",
                    field.extents,
                    volume.geometry().extents
                )));
            }
            warp_volume(&volume, &field, interpolation)?
        }
        (None, Some(ckpt)) => checkpoint::load(ckpt)?.warp_field(&volume, interpolation)?,
        (None, None) => return Err(CliError::Usage("one of --field or --checkpoint is required".into())),
    };
    save_volume_atomic(&args.out, &warped)?;
    if json_out {
        print_line(&json!({ "output": args.out.to_string_lossy() }).to_string());
    }
    Ok(())
}
