//! Layered run configuration.
//!
//! Precedence, highest first: command-line flags, environment variables
//! (wired through clap), the optional TOML file, built-in defaults. Every
//! command echoes its fully resolved configuration to the run log so a
//! logged run can be reproduced without guessing what defaults applied.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    pub base_url: Option<String>,
    pub token: Option<String>,
    pub image_set: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Worker threads; 0 means one per core.
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
}

impl FileConfig {
    /// Parse the file at `path`, or return defaults when no file was named.
    /// A named file that is missing or malformed is an error; silently
    /// ignoring it would defeat the point of passing it.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
