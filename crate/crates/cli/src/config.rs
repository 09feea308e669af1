//! Run configuration files (TOML or JSON).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dinecap::capest::TrainConfig;
use dinecap::channels::ChannelSpec;
use dinecap::dine::DineConfig;
use serde::Deserialize;

/// Every section is optional; unknown keys anywhere are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// Settings for `capacity` and `sweep`.
    pub train: Option<TrainConfig>,
    /// Settings for `di-estimate`.
    pub dine: Option<DineConfig>,
    pub channel: Option<ChannelSpec>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed: RunConfigFile = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => bail!("config file must end in .toml or .json: {}", path.display()),
        };
        parsed.validate()?;
        Ok(parsed)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.train {
            t.validate().context("invalid [train] section")?;
        }
        if let Some(d) = &self.dine {
            d.validate().context("invalid [dine] section")?;
        }
        if let Some(c) = &self.channel {
            c.validate().context("invalid [channel] section")?;
        }
        Ok(())
    }
}
