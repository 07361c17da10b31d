//! Fit configuration files. Keys mirror [`FitConfig`]; omitted keys take
//! their defaults and unknown keys are rejected.
//!
//! ```toml
//! iterations = 2000
//! lr_start = 3e-3
//! seed = 7
//!
//! [net]
//! width = 256
//! ```

use std::path::Path;

use kinefit_core::fitting::FitConfig;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::read_text;

pub fn load_config(path: &Path) -> Result<FitConfig> {
    let text = read_text(path)?;
    let config: FitConfig = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
    config.validate().map_err(|e| Error::format(path, e))?;
    Ok(config)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the configuration's canonical JSON form.
pub fn config_hash(config: &FitConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}
