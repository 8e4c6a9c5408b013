//! Run configuration loading: JSON file, dotted-path overrides, flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use dgrec::pipeline::RunConfig;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Parses the right-hand side of `key=value`: JSON when it parses as JSON,
/// otherwise a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot separated) inside `root`. Every segment must already
/// exist, so misspelled keys are reported instead of silently ignored.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key=value"))?;
    let mut node = &mut *root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
    }
    *node = parse_value(raw);
    Ok(())
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base: RunConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).context("applying overrides")
}

pub fn canonical_json(cfg: &RunConfig) -> Result<String> {
    Ok(serde_json::to_string(cfg)?)
}

pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let digest = Sha256::digest(canonical_json(cfg)?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn check_overrides(overrides: &[String]) -> Result<()> {
    if let Some(bad) = overrides.iter().find(|o| !o.contains('=')) {
        bail!("unexpected argument {bad:?}; overrides look like key=value");
    }
    Ok(())
}
