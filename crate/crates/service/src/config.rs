//! TOML configuration with environment overrides.
//!
//! ```toml
//! seed = 42
//! port = 8080
//! data_dir = "ibn-data"
//! trigger_k = 10            # omit for manual retraining only
//!
//! [geometry]
//! d_model = 64
//! heads = 4
//! layers = 2
//! d_ff = 256
//! max_len = 32
//!
//! [optimizer]
//! learning_rate = 0.05
//! momentum = 0.9
//! batch_size = 16
//! max_grad_norm = 5.0
//! plateau_patience = 2
//!
//! [thresholds]
//! confidence = 0.8
//! max_text_len = 512
//! ```
//!
//! `IBN_PORT`, `IBN_DATA_DIR` and `IBN_SEED` override the file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ibn_core::pipeline::{Geometry, Mode, PipelineConfig, TrainConfig};

use crate::backend::RetrainConfig;
use crate::engine::EngineConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_grad_norm: Option<f64>,
    pub plateau_patience: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            max_grad_norm: t.max_grad_norm,
            plateau_patience: t.plateau_patience,
        }
    }
}

impl OptimizerConfig {
    fn stage(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            max_grad_norm: self.max_grad_norm,
            plateau_patience: self.plateau_patience,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub confidence: f64,
    pub max_text_len: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        let e = EngineConfig::default();
        Self {
            confidence: e.confidence_threshold,
            max_text_len: e.max_text_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub corpus_size: usize,
    pub vocab_size: usize,
    pub dev_fraction: f64,
    pub mlm_epochs: usize,
    pub ner_epochs: usize,
    pub pos_epochs: usize,
    pub ner_mode: Mode,
    pub pos_mode: Mode,
    pub compare_modes: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            corpus_size: 2000,
            vocab_size: p.vocab_size,
            dev_fraction: p.dev_fraction,
            mlm_epochs: p.mlm.epochs,
            ner_epochs: p.ner.epochs,
            pos_epochs: p.pos.epochs,
            ner_mode: p.ner_mode,
            pos_mode: p.pos_mode,
            compare_modes: p.compare_modes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub port: u16,
    pub data_dir: PathBuf,
    pub trigger_k: Option<usize>,
    /// JSON inventory file; the built-in inventory is used when absent.
    pub inventory: Option<PathBuf>,
    pub geometry: Geometry,
    pub optimizer: OptimizerConfig,
    pub thresholds: Thresholds,
    pub training: TrainingConfig,
    pub retrain: RetrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            port: 8080,
            data_dir: PathBuf::from("ibn-data"),
            trigger_k: None,
            inventory: None,
            geometry: Geometry::desk(),
            optimizer: OptimizerConfig::default(),
            thresholds: Thresholds::default(),
            training: TrainingConfig::default(),
            retrain: RetrainConfig::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` if given, then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = var("IBN_PORT") {
            self.port = v.parse().with_context(|| format!("IBN_PORT={v}"))?;
        }
        if let Some(v) = var("IBN_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = var("IBN_SEED") {
            self.seed = v.parse().with_context(|| format!("IBN_SEED={v}"))?;
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let t = &self.training;
        PipelineConfig {
            geometry: self.geometry,
            vocab_size: t.vocab_size,
            dev_fraction: t.dev_fraction,
            mlm: self.optimizer.stage(t.mlm_epochs, 0),
            ner: self.optimizer.stage(t.ner_epochs, 0),
            ner_mode: t.ner_mode,
            pos: self.optimizer.stage(t.pos_epochs, 0),
            pos_mode: t.pos_mode,
            compare_modes: t.compare_modes,
            seed: 0,
        }
        .with_seed(self.seed)
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            confidence_threshold: self.thresholds.confidence,
            max_text_len: self.thresholds.max_text_len,
            trigger_k: self.trigger_k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_library() {
        let cfg = Config::default();
        let p = cfg.pipeline();
        let lib = PipelineConfig::default();
        assert_eq!(p.geometry, lib.geometry);
        assert_eq!(p.mlm, lib.mlm);
        assert_eq!(p.ner, lib.ner);
        assert_eq!(p.pos, lib.pos);
        assert_eq!(cfg.engine(), EngineConfig::default());
    }

    #[test]
    fn parses_the_documented_keys() {
        let cfg = Config::parse(
            r#"
            seed = 7
            port = 9000
            trigger_k = 10
            [geometry]
            d_model = 32
            heads = 2
            layers = 1
            d_ff = 64
            max_len = 24
            [optimizer]
            learning_rate = 0.1
            [thresholds]
            confidence = 0.6
            "#,
        )
        .unwrap();
        assert_eq!((cfg.seed, cfg.port, cfg.trigger_k), (7, 9000, Some(10)));
        assert_eq!(cfg.geometry.d_model, 32);
        assert_eq!(cfg.pipeline().ner.learning_rate, 0.1);
        assert_eq!(cfg.pipeline().ner.seed, 8);
        assert_eq!(cfg.engine().confidence_threshold, 0.6);
        assert_eq!(cfg.optimizer.momentum, 0.9);
        assert!(Config::parse("prot = 1").is_err());
    }

    #[test]
    fn environment_overrides_file() {
        let mut cfg = Config::parse("port = 1\nseed = 2").unwrap();
        cfg.apply_env(|k| match k {
            "IBN_PORT" => Some("8123".into()),
            "IBN_DATA_DIR" => Some("/tmp/x".into()),
            "IBN_SEED" => Some("99".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!((cfg.port, cfg.seed), (8123, 99));
        assert_eq!(cfg.data_dir, PathBuf::from("/tmp/x"));
        assert!(cfg.apply_env(|_| Some("nope".into())).is_err());
    }
}
