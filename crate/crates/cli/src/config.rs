//! Registration configuration: engine defaults, a JSON file and
//! `--set key=value` overrides, merged in that order.

use std::fs;
use std::path::{Path, PathBuf};

use inreg_core::io::Channel;
use inreg_core::model::GranularityMode;
use inreg_core::train::{Modality, RunConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Everything a registration run reads. `run` holds the engine settings;
/// in a config file it may be partial and is merged over the defaults for
/// the input size, mode and modality.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub fixed: Option<PathBuf>,
    #[serde(default)]
    pub moving: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Ground-truth warp JSON; adds the corner error to the summary.
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub fixed_labels: Option<PathBuf>,
    #[serde(default)]
    pub moving_labels: Option<PathBuf>,
    #[serde(default = "default_channel")]
    pub fixed_channel: Channel,
    #[serde(default = "default_channel")]
    pub moving_channel: Channel,
    /// Percentile clip and min-max rescale of both inputs.
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub run: Value,
}

fn default_channel() -> Channel {
    Channel::Luma
}

fn yes() -> bool {
    true
}

fn default_threshold() -> f64 {
    inreg_core::metrics::DEFAULT_SUCCESS_THRESHOLD
}

impl Default for CliConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Map::new())).expect("all fields have defaults")
    }
}

/// Parses a JSON config file into a raw tree.
pub fn read_config_file(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::Usage(format!(
            "{}: configuration must be a JSON object",
            path.display()
        )));
    }
    Ok(value)
}

/// Applies `key.path=value`; the value is parsed as JSON and falls back to
/// a plain string.
pub fn apply_set(tree: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("invalid key {key:?} in --set")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_value(tree, key, value);
    Ok(())
}

/// Stores `value` at the dotted `key`, creating objects along the way.
pub fn set_value(tree: &mut Value, key: &str, value: Value) {
    let mut node = tree;
    for part in key.split('.') {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        node = node
            .as_object_mut()
            .expect("object")
            .entry(part)
            .or_insert(Value::Null);
    }
    *node = value;
}

/// Recursively overlays `patch` on `base`; objects merge, everything else
/// replaces.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

pub fn parse_cli_config(tree: &Value) -> CliResult<CliConfig> {
    serde_json::from_value(tree.clone()).map_err(|e| CliError::Usage(format!("configuration: {e}")))
}

fn field<T: serde::de::DeserializeOwned>(run: &Value, key: &str) -> CliResult<Option<T>> {
    match run.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| CliError::Usage(format!("run.{key}: {e}"))),
    }
}

/// Defaults for `extents` with the partial `overrides` merged on top.
/// Changing `epochs` alone rescales the schedule target and motion warm-up.
pub fn resolve_run(extents: &[usize], overrides: &Value) -> CliResult<RunConfig> {
    let overrides = match overrides {
        Value::Null => Value::Object(Map::new()),
        Value::Object(_) => overrides.clone(),
        _ => return Err(CliError::Usage("run must be a JSON object".into())),
    };
    let granularity: GranularityMode = field(&overrides, "granularity")?.unwrap_or(GranularityMode::Rigid);
    let modality: Modality = field(&overrides, "modality")?.unwrap_or(Modality::Single);
    let mut defaults = RunConfig::defaults(extents, granularity, modality);
    if let Some(epochs) = field::<usize>(&overrides, "epochs")? {
        defaults.epochs = epochs;
        defaults.target_epoch = (epochs * 2 / 5).max(1);
        defaults.motion_warmup = epochs / 5;
    }
    let mut tree = serde_json::to_value(&defaults).expect("serializable defaults");
    merge(&mut tree, &overrides);
    let run: RunConfig =
        serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("run configuration: {e}")))?;
    run.validate()?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn set_creates_nested_keys() {
        let mut tree = json!({});
        apply_set(&mut tree, "run.model.image.grid.levels=6").unwrap();
        apply_set(&mut tree, "fixed=a.png").unwrap();
        assert_eq!(tree, json!({"run": {"model": {"image": {"grid": {"levels": 6}}}}, "fixed": "a.png"}));
        assert!(apply_set(&mut tree, "novalue").is_err());
        assert!(apply_set(&mut tree, "a..b=1").is_err());
    }

    #[test]
    fn merge_is_recursive() {
        let mut base = json!({"a": {"b": 1, "c": 2}, "d": 3});
        merge(&mut base, &json!({"a": {"c": 5}, "e": 6}));
        assert_eq!(base, json!({"a": {"b": 1, "c": 5}, "d": 3, "e": 6}));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(resolve_run(&[32, 32], &json!({"epochz": 3})).is_err());
        assert!(resolve_run(&[32, 32], &json!({"model": {"image": {"grid": {"lvls": 3}}}})).is_err());
        assert!(parse_cli_config(&json!({"fixd": "a.png"})).is_err());
    }

    #[test]
    fn epochs_rescale_the_schedule() {
        let run = resolve_run(&[32, 32], &json!({"epochs": 50})).unwrap();
        assert_eq!((run.epochs, run.target_epoch, run.motion_warmup), (50, 20, 10));
        let run = resolve_run(&[32, 32], &json!({"epochs": 50, "target_epoch": 7})).unwrap();
        assert_eq!(run.target_epoch, 7);
    }

    #[test]
    fn mode_changes_motion_grid() {
        let run = resolve_run(&[32, 32], &json!({"granularity": "deformable"})).unwrap();
        assert!(run.model.motion.grid.finest_resolution > run.model.motion.grid.base_resolution);
    }
}
