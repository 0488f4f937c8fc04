//! TOML run configuration. Sections map onto the owning modules' config
//! types; flags override file keys and the resolved config is echoed into
//! the manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xform_core::data::{GtDist, SyntheticSpec};
use xform_core::estimator::EstimatorConfig;
use xform_core::pretext::EvalProtocol;
use xform_core::transforms::ParamKind;

use crate::{config_err, CliError, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub dataset: Option<DatasetSection>,
    pub estimator: Option<EstimatorConfig>,
    pub eval: Option<EvalProtocol>,
}

/// Synthetic-dataset section: class count, geometry, and per-parameter
/// ground-truth distributions in physical units, keyed by parameter name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub classes: usize,
    pub image_size: usize,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub color: bool,
    #[serde(default)]
    pub params: BTreeMap<String, GtDist>,
}

impl DatasetSection {
    pub fn to_spec(&self, seed_override: Option<u64>) -> Result<SyntheticSpec> {
        let mut params = Vec::new();
        for (name, dist) in &self.params {
            let kind = ParamKind::parse(name)
                .ok_or_else(|| CliError::Config(format!("unknown parameter `{name}`")))?;
            params.push((kind, dist.clone()));
        }
        Ok(SyntheticSpec {
            classes: self.classes,
            image_size: self.image_size,
            samples: self.samples,
            seed: seed_override.unwrap_or(self.seed),
            color: self.color,
            params,
        })
    }
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Training preset selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(config_err(format!("unknown preset `{other}` (expected desk|paper)"))),
        }
    }

    pub fn iterations(self) -> usize {
        match self {
            Preset::Desk => EstimatorConfig::desk().iterations,
            Preset::Paper => EstimatorConfig::paper().iterations,
        }
    }
}

/// Resolve the estimator config from file section, preset and flag
/// overrides (flags win over preset, preset over file).
pub fn resolve_estimator(
    file: &ConfigFile,
    preset: Option<Preset>,
    seed: Option<u64>,
    iterations: Option<usize>,
) -> EstimatorConfig {
    let mut cfg = file.estimator.clone().unwrap_or_default();
    if let Some(p) = preset {
        cfg.iterations = p.iterations();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(it) = iterations {
        cfg.iterations = it;
    }
    cfg
}
