//! Run configuration: built-in defaults, overridden by a JSON file, overridden
//! by command-line flags.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use splatperc::losses::LossConfig;
use splatperc::ratecodec::{RdConfig, DEFAULT_LAMBDAS, DEFAULT_STEPS};
use splatperc::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateSettings {
    pub lambdas: Vec<f64>,
    /// Quantization steps of position, log-scale, rotation, color, opacity.
    pub steps: [f64; 5],
    pub prior_lr: f64,
}

impl Default for RateSettings {
    fn default() -> Self {
        let rd = RdConfig::default();
        Self {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            steps: DEFAULT_STEPS,
            prior_lr: rd.prior_lr,
        }
    }
}

/// Everything a fitting command depends on. Serialized into every output
/// so a run can be repeated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub rate: RateSettings,
}

impl RunConfig {
    /// Defaults, or the defaults overlaid with `path`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn rd(&self, lambda: f64) -> RdConfig {
        RdConfig {
            lambda,
            lambdas: self.rate.lambdas.clone(),
            steps: self.rate.steps,
            prior_lr: self.rate.prior_lr,
            train: self.train.clone(),
            loss: self.loss.clone(),
        }
    }
}
