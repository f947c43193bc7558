use std::fs;
use std::path::Path;

use rotdrop::experiments::ExperimentSpec;
use rotdrop::generators::GeneratorConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Config file layout. Every section is optional; command-line flags
/// override whatever the file sets.
///
/// ```toml
/// [experiment]
/// name = "desk"
/// trials = 5
/// seed = 1
///
/// [experiment.dataset]
/// source = "mnist"
/// train_subset = 1000
///
/// [generator]
/// kind = "proposed"
/// n = 64
/// p = 0.5
///
/// [sweep]
/// r_values = [1, 2, 4, 8, 16, 32]
///
/// [mask_stats]
/// samples = 10000
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_stats: Option<MaskStatsSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub r_values: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskStatsSection {
    pub samples: usize,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, UsageError> {
        toml::from_str(text).map_err(|e| UsageError(format!("invalid config: {}", e.message().trim())))
    }

    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| UsageError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self, UsageError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
