//! Pipeline configuration: a JSON file overlaid with command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every key any subcommand understands. Absent keys fall back to command
/// defaults. `out` and worker count are deliberately not part of it so the
/// echoed config never depends on where or how a run executes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pivot_vocab: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_vocab: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_span: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pivot_checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pivot_dump: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_dump: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub pivot: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trim_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drop_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))
    }

    /// Canonical text of the effective config plus the command name.
    pub fn echo(&self, command: &str) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut()
            .expect("config is an object")
            .insert("command".into(), command.into());
        let mut s = fusekit::canonical::to_canonical_json_pretty(&v).expect("value serializes");
        s.push('\n');
        s
    }
}

/// Overwrites `slot` when the flag was given.
pub fn overlay<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

pub fn require<'a, T>(slot: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
    slot.as_ref()
        .ok_or_else(|| CliError::config(format!("missing required setting `{key}`")))
}

/// A required input path that must exist.
pub fn input_path(slot: &Option<String>, key: &str) -> Result<PathBuf, CliError> {
    let p = PathBuf::from(require(slot, key)?);
    existing(p, key)
}

pub fn optional_input_path(slot: &Option<String>, key: &str) -> Result<Option<PathBuf>, CliError> {
    slot.as_ref()
        .map(|s| existing(PathBuf::from(s), key))
        .transpose()
}

fn existing(p: PathBuf, key: &str) -> Result<PathBuf, CliError> {
    if p.is_file() {
        Ok(p)
    } else {
        Err(CliError::config(format!(
            "`{key}` path {} does not exist",
            p.display()
        )))
    }
}

/// Creates `out`, refusing a non-empty directory unless `overwrite`.
pub fn prepare_out_dir(out: &Path, overwrite: bool) -> Result<(), CliError> {
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::config(format!(
                "output path {} is not a directory",
                out.display()
            )));
        }
        let non_empty = fs::read_dir(out)
            .map_err(|e| CliError::data(format!("cannot list {}: {e}", out.display())))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(CliError::config(format!(
                "output directory {} is not empty (pass --overwrite to reuse it)",
                out.display()
            )));
        }
        return Ok(());
    }
    fs::create_dir_all(out)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", out.display())))
}
