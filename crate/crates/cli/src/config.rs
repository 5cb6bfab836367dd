//! JSON configuration: every training hyperparameter plus optional paths.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtreg::trainer::TrainConfig;
use serde_json::Value;

/// Paths a config file may carry; command-line flags take precedence.
#[derive(Debug, Default, PartialEq)]
pub struct ConfigPaths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Parses and validates a config document. Unknown keys are rejected.
pub fn parse(text: &str) -> Result<(TrainConfig, ConfigPaths)> {
    let mut value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
    let obj = value
        .as_object_mut()
        .context("config must be a JSON object")?;
    let mut take = |key: &str| -> Result<Option<PathBuf>> {
        match obj.remove(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.into())),
            Some(v) => bail!("`{key}` must be a path string, got {v}"),
        }
    };
    let paths = ConfigPaths {
        data: take("data")?,
        out: take("out")?,
        log: take("log")?,
    };
    let cfg: TrainConfig = serde_json::from_value(value).context("invalid config")?;
    cfg.validate()?;
    Ok((cfg, paths))
}

/// Reads `path`, or returns the defaults when no file is given.
pub fn load(path: Option<&Path>) -> Result<(TrainConfig, ConfigPaths)> {
    match path {
        None => Ok((TrainConfig::default(), ConfigPaths::default())),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse(&text).with_context(|| format!("in {}", p.display()))
        }
    }
}
