//! Run configuration resolution: flag > config file > built-in default.

use std::fs;
use std::path::Path;

use transcam::train::RunConfig;

use crate::{CliError, CliResult, RunOverrides};

pub fn load_file(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(transcam::Error::io(path, e)))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Starts from the defaults, layers the config file (if any) on top, then
/// every flag that was given, and validates the result.
pub fn resolve(o: &RunOverrides) -> CliResult<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => load_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = o.w_conv {
        cfg.w_conv = v;
    }
    if let Some(v) = o.w_trans {
        cfg.w_trans = v;
    }
    if let Some(v) = &o.scales {
        cfg.scales = v.clone();
    }
    if let Some(v) = o.range {
        cfg.range = v.into();
    }
    if let Some(v) = o.mode {
        cfg.coupling = v.into();
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_json(cfg: &RunConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("run config serializes")
}
