//! End-to-end run configuration: data source, split layout, backbone
//! choice, corrector hyperparameters, and the beta grid. A run is fully
//! determined by one of these plus nothing else, and its canonical hash
//! ties downstream artifacts back to the config that produced them.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{OverlapMode, ToyForecasterKind};
use crate::calibration::BetaGrid;
use crate::corrector::Ablation;
use crate::data::SplitSpec;
use crate::decomp::DecompConfig;
use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        timestamp_column: Option<String>,
    },
    Synthetic(SynthConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "backbone", rename_all = "snake_case")]
pub enum BackboneSpec {
    Toy(ToyForecasterKind),
    /// Replays forecasts exported by an external model. Positions in the
    /// replay file are absolute indices into the full series.
    Replay { path: PathBuf, series_id: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub split: SplitSpec,
    pub w: usize,
    pub l: usize,
    /// Validation rollout length used to build correction samples.
    pub t_prime: usize,
    pub horizons: Vec<usize>,
    /// Stride between validation windows when building samples.
    pub stride_samples: usize,
    /// Stride between test windows during evaluation.
    pub stride_eval: usize,
    pub decomp: DecompConfig,
    pub hidden: usize,
    pub dropout_p: f64,
    pub ablation: Ablation,
    pub backbone: BackboneSpec,
    pub train: TrainConfig,
    pub grid: BetaGrid,
    /// Horizon used for beta selection; defaults to the largest entry of
    /// `horizons`.
    #[serde(default)]
    pub beta_eval_horizon: Option<usize>,
    /// Size of the balanced beta-selection set; defaults to the number
    /// of validation windows at the beta-selection horizon.
    #[serde(default)]
    pub balanced_target: Option<usize>,
    pub overlap: OverlapMode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SynthConfig::default()),
            split: SplitSpec::standard(0.7, 0.1, 0.2),
            w: 96,
            l: 96,
            t_prime: 192,
            horizons: vec![96, 192, 336, 720],
            stride_samples: 1,
            stride_eval: 1,
            decomp: DecompConfig::default(),
            hidden: 32,
            dropout_p: 0.5,
            ablation: Ablation::default(),
            backbone: BackboneSpec::Toy(ToyForecasterKind::Persistence),
            train: TrainConfig::default(),
            grid: BetaGrid::default(),
            beta_eval_horizon: None,
            balanced_target: None,
            overlap: OverlapMode::Overwrite,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w == 0 || self.l == 0 {
            return Err(Error::Config("w and l must be positive".into()));
        }
        if self.t_prime < self.l {
            return Err(Error::Config(format!(
                "t_prime ({}) must be at least the chunk length l ({})",
                self.t_prime, self.l
            )));
        }
        if self.horizons.is_empty() {
            return Err(Error::Config("at least one evaluation horizon".into()));
        }
        if self.horizons.iter().any(|&h| h < self.l) {
            return Err(Error::Config(
                "every horizon must be at least the chunk length l".into(),
            ));
        }
        if self.stride_samples == 0 || self.stride_eval == 0 {
            return Err(Error::Config("strides must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if let Some(h) = self.beta_eval_horizon {
            if h < self.l {
                return Err(Error::Config(
                    "beta evaluation horizon must be at least l".into(),
                ));
            }
        }
        self.split.validate()?;
        self.grid.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn beta_horizon(&self) -> usize {
        self.beta_eval_horizon
            .unwrap_or_else(|| *self.horizons.iter().max().unwrap())
    }

    /// SHA-256 of the canonical JSON serialization; embedded in every
    /// artifact so stages can refuse mismatched inputs.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), a.hash());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = RunConfig::default();
        cfg.t_prime = 10;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.horizons = vec![48];
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.horizons.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.dropout_p = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn beta_horizon_defaults_to_max() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.beta_horizon(), 720);
        let mut cfg2 = RunConfig::default();
        cfg2.beta_eval_horizon = Some(192);
        assert_eq!(cfg2.beta_horizon(), 192);
    }
}
