//! Run configuration: a TOML document whose every key can be overridden on
//! the command line with `--set section.key=value`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fos_core::dataset::{DecomposeOptions, SyntheticConfig};
use fos_core::evaluation::EvalConfig;
use fos_core::fg_encoder::FgTrainConfig;
use fos_core::query_encoder::{AblationMode, QueryTrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    /// Annotation document for `build-dataset` when not synthetic.
    pub annotations: Option<PathBuf>,
    /// Attribute schema file; the bundled person schema when unset.
    pub schema: Option<PathBuf>,
    pub teacher: PathBuf,
    /// `{mode}` is replaced by the ablation mode.
    pub student: String,
    pub store: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "out/dataset".into(),
            annotations: None,
            schema: None,
            teacher: "out/teacher.ckpt".into(),
            student: "out/student-{mode}.ckpt".into(),
            store: "out/store.json".into(),
            reports: "out/reports".into(),
        }
    }
}

impl Paths {
    pub fn student_for(&self, mode: AblationMode) -> PathBuf {
        PathBuf::from(self.student.replace("{mode}", mode.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub synthetic: SyntheticConfig,
    pub decompose: DecomposeOptions,
    pub foreground: FgTrainConfig,
    pub query: QueryTrainConfig,
    pub eval: EvalConfig,
}

/// Parses a command-line value as a TOML value, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(BadInput(format!("malformed config key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!(BadInput(format!("config key '{key}' crosses a non-table value"))))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Error tag for invalid configuration or arguments (exit code 2).
#[derive(Debug)]
pub struct BadInput(pub String);

impl std::fmt::Display for BadInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

impl RunConfig {
    /// Loads the optional file, then applies `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| anyhow!(BadInput(format!("cannot read config {}: {e}", p.display()))))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| anyhow!(BadInput(format!("config {}: {e}", p.display()))))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            apply(&mut table, k, v)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow!(BadInput(format!("invalid configuration: {}", e.message()))))?;
        cfg.foreground.validate().context("foreground settings")?;
        cfg.query.validate().context("query settings")?;
        cfg.synthetic.validate().context("synthetic settings")?;
        Ok(cfg)
    }

    /// Explicit seed, then `FOS_SEED`, then the default.
    pub fn seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var("FOS_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| anyhow!(BadInput(format!("FOS_SEED is not an unsigned integer: '{v}'")))),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }

    /// SHA-256 over everything except file locations, with the resolved
    /// seed, so moving output directories keeps artifacts identical.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        let obj = v.as_object_mut().expect("struct serializes to an object");
        obj.remove("paths");
        obj.insert("seed".into(), self.seed()?.into());
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
    }
}
