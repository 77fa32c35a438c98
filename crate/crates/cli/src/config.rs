//! Run configuration: one TOML document with a section per stage.
//!
//! ```toml
//! seed = 7
//!
//! [synth]
//! time_steps = 120
//!
//! [model]
//! encoder_width = 8
//! sa_channels = 4
//!
//! [train]
//! epochs = 20
//!
//! [analysis]
//! threshold_quantile = 0.9
//! filter_iou = 0.3
//! ```
//!
//! Every key is optional. Unknown keys are errors. The seed lives only at
//! the top level and is copied into the model, training and generator
//! sections; command-line flags take precedence over the file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use scaae::analysis::DEFAULT_FILTER_IOU;
use scaae::fbn::DEFAULT_THRESHOLD_QUANTILE;
use scaae::model::ModelConfig;
use scaae::synthdata::SynthConfig;
use scaae::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub threshold_quantile: f64,
    pub filter_iou: f64,
    /// Time steps per forward pass during extraction.
    pub extract_batch: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { threshold_quantile: DEFAULT_THRESHOLD_QUANTILE, filter_iou: DEFAULT_FILTER_IOU, extract_batch: 12 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text)?;
        for section in ["synth", "model", "train"] {
            if table.get(section).and_then(|v| v.get("seed")).is_some() {
                bail!("`seed` belongs at the top level, not in [{section}]");
            }
        }
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Loads `path` if given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Settles the seed (flag first, then file) and copies it into every
    /// section. Fails when neither provides one.
    pub fn with_seed(mut self, flag: Option<u64>) -> Result<Self> {
        let Some(seed) = flag.or(self.seed) else {
            bail!("a seed is required: pass --seed or set `seed` in the config file");
        };
        self.seed = Some(seed);
        self.synth.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        Ok(self)
    }

    /// Serializes with the seed only at the top level, so the output can be
    /// loaded again.
    pub fn to_toml(&self) -> Result<String> {
        let mut table = toml::Table::try_from(self)?;
        for section in ["synth", "model", "train"] {
            if let Some(toml::Value::Table(t)) = table.get_mut(section) {
                t.remove("seed");
            }
        }
        Ok(toml::to_string(&table)?)
    }
}
