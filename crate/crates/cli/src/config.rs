//! Run configuration plumbing: a JSON file supplies per-subcommand sections,
//! flags override file values, and every command echoes the fully resolved
//! configuration into its output directory.

use crate::CliError;
use anyhow::{anyhow, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use std::fs;
use std::path::Path;

const TOP_LEVEL_KEYS: [&str; 6] = ["seed", "gen", "pretrain", "finetune", "eval", "model"];

/// Parsed `--config` file. Sections mirror module config types; a top-level
/// `seed` acts as the default seed for every section that takes one.
pub struct FileConfig {
    value: Value,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let value = match path {
            None => Value::Object(Default::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))
                    .map_err(CliError::usage)?;
                let value: Value = serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))
                    .map_err(CliError::usage)?;
                let obj = value.as_object().ok_or_else(|| {
                    CliError::usage(anyhow!("config {} must be a JSON object", p.display()))
                })?;
                if let Some(unknown) = obj.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str()))
                {
                    return Err(CliError::usage(anyhow!(
                        "config {}: unknown key `{unknown}` (expected one of {})",
                        p.display(),
                        TOP_LEVEL_KEYS.join(", ")
                    )));
                }
                value
            }
        };
        Ok(FileConfig { value })
    }

    fn global_seed(&self) -> Option<u64> {
        self.value.get("seed").and_then(Value::as_u64)
    }

    /// Deserializes one section, starting from the type's defaults. When
    /// `seeded`, a top-level `seed` fills the section's seed field unless
    /// the section sets its own.
    pub fn section<T: DeserializeOwned + Default>(
        &self,
        name: &str,
        seeded: bool,
    ) -> Result<T, CliError> {
        let mut section = self
            .value
            .get(name)
            .cloned()
            .unwrap_or_else(|| Value::Object(Default::default()));
        if seeded {
            if let (Some(seed), Some(obj)) = (self.global_seed(), section.as_object_mut()) {
                obj.entry("seed").or_insert(seed.into());
            }
        }
        serde_json::from_value(section)
            .with_context(|| format!("config section `{name}`"))
            .map_err(CliError::usage)
    }
}

/// Writes `resolved_config.json` into `dir`, creating it if needed. The
/// serialized value must reproduce the run exactly when fed back in.
pub fn write_resolved(dir: &Path, resolved: &impl Serialize) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::runtime)?;
    let mut text = serde_json::to_string_pretty(resolved).expect("config serializes");
    text.push('\n');
    let path = dir.join("resolved_config.json");
    fs::write(&path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::runtime)
}

/// The directory an output file lives in; "." when the path has no parent.
pub fn out_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}
