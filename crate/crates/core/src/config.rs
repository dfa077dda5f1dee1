//! Run configuration: one strict JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BnConfig, Mode, ModelConfig};
use crate::cnn::CnnConfig;
use crate::error::{Error, Result};
use crate::roi::FusionParams;
use crate::vit::VitConfig;
use crate::vmc::VmcConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub height: usize,
    pub width: usize,
    pub batch: usize,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            height: 64,
            width: 64,
            batch: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            momentum: 0.9,
            steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dump: Option<String>,
    pub losses: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub full_depth: bool,
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default)]
    pub vit: VitConfig,
    #[serde(default)]
    pub cnn: CnnConfig,
    #[serde(default)]
    pub vmc: VmcConfig,
    #[serde(default)]
    pub bn: BnConfig,
    #[serde(default = "default_baseline_taps")]
    pub baseline_taps: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionParams>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_baseline_taps() -> Vec<usize> {
    ModelConfig::default().baseline_taps
}

impl RunConfig {
    /// Defaults for everything but the seed.
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            mode: Mode::default(),
            full_depth: false,
            input: InputConfig::default(),
            vit: VitConfig::default(),
            cnn: CnnConfig::default(),
            vmc: VmcConfig::default(),
            bn: BnConfig::default(),
            baseline_taps: default_baseline_taps(),
            fusion: None,
            optimizer: OptimizerConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            vit: self.vit.clone(),
            cnn: self.cnn.clone(),
            vmc: self.vmc.clone(),
            bn: self.bn.clone(),
            baseline_taps: self.baseline_taps.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.model();
        m.validate()?;
        m.check_input(self.input.height, self.input.width)?;
        if self.input.batch == 0 {
            return Err(Error::Config("input.batch must be ≥ 1".into()));
        }
        if let Some(f) = &self.fusion {
            f.validate()?;
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config(format!("optimizer: bad lr/momentum {o:?}")));
        }
        Ok(())
    }

    /// Canonical JSON of the whole config (fixed field order, no whitespace).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// Hex sha256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory_and_unknown_keys_rejected() {
        assert!(RunConfig::from_json("{}").is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "vmc": {"heads": 4, "nope": 1}}"#).is_err());
        let c = RunConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(c, RunConfig::with_seed(7));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::with_seed(1);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.vmc.blocks_per_group = 2;
        assert_ne!(a.hash(), b.hash());
        let back = RunConfig::from_json(&a.canonical_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn divisibility_checked() {
        assert!(RunConfig::from_json(r#"{"seed": 1, "input": {"height": 48}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "fusion": {"beta": 0.0, "gamma": 0.5}}"#).is_err());
    }
}
