//! Shared file helpers.

use std::fs;
use std::path::{Path, PathBuf};

use inreg_core::field::{Geometry, ScalarField, Volume};
use inreg_core::io::{self, Channel};

use crate::error::{CliError, CliResult};

/// Writes one line to stdout; a closed pipe is not an error.
pub fn print_line(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

pub fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = temp_sibling(path);
    fs::write(&tmp, bytes).map_err(|e| io_error(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Saves a volume by extension (`.png` or `.json` with its `.raw`
/// payload) without exposing partial files.
pub fn save_volume_atomic(path: &Path, volume: &Volume) -> CliResult<()> {
    match extension(path).as_str() {
        "json" => {
            let raw = path.with_extension("raw");
            let name = raw.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let (text, bytes) = io::encode_raw_volume(volume, &name)?;
            write_atomic(&raw, &bytes)?;
            write_atomic(path, text.as_bytes())
        }
        "png" => {
            let mut name = path.file_stem().unwrap_or_default().to_os_string();
            name.push(".partial.png");
            let tmp = path.with_file_name(name);
            io::save_volume(&tmp, volume)?;
            fs::rename(&tmp, path).map_err(|e| io_error(path, e))
        }
        other => Err(CliError::Usage(format!(
            "{}: unsupported output extension {other:?}; use .png or .json",
            path.display()
        ))),
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default()
}

/// Intensity image from PNG/PGM (selected channel) or a scalar volume.
pub fn load_scalar(path: &Path, channel: Channel) -> CliResult<ScalarField> {
    if matches!(extension(path).as_str(), "png" | "pgm") {
        return Ok(io::load_image_2d(path, channel)?);
    }
    match io::load_volume(path)? {
        Volume::Scalar(f) => Ok(f),
        Volume::Label(l) => Ok(ScalarField::new(
            l.geometry.clone(),
            l.values.iter().map(|&v| v as f64).collect(),
        )?),
    }
}

/// Image file name for a field of this dimension.
pub fn image_name(stem: &str, geometry: &Geometry) -> String {
    if geometry.dim() == 2 {
        format!("{stem}.png")
    } else {
        format!("{stem}.json")
    }
}

/// Pair directories (`pair_*`) under `root`, sorted by name.
pub fn pair_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| io_error(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_error(root, e))?;
        let path = entry.path();
        let is_pair = entry
            .file_name()
            .to_str()
            .is_some_and(|n| n.starts_with("pair_"));
        if is_pair && path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// First existing file among `<stem>.png`, `<stem>.json`, `<stem>.nii`.
pub fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "json", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.exists())
}

pub fn parse_size(text: &str) -> CliResult<Vec<usize>> {
    let parts: Vec<&str> = text.split('x').collect();
    let values = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Usage(format!("invalid size {text:?}; expected e.g. 64, 96x80 or 32x32x32")))?;
    let extents = match values.len() {
        1 => vec![values[0]; 2],
        2 | 3 => values,
        _ => return Err(CliError::Usage(format!("size {text:?} must have 1 to 3 components"))),
    };
    if extents.iter().any(|&n| n < 2) {
        return Err(CliError::Usage("every extent must be at least 2".into()));
    }
    Ok(extents)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("64").unwrap(), vec![64, 64]);
        assert_eq!(parse_size("96x80").unwrap(), vec![96, 80]);
        assert_eq!(parse_size("8x8x8").unwrap(), vec![8, 8, 8]);
        assert!(parse_size("1").is_err());
        assert!(parse_size("axb").is_err());
    }
}
