//! Experiment configuration read from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::detect::DEFAULT_THRESHOLD;
use super::metrics::CollarConfig;
use crate::copo::{CopoConfig, RewardConfig};
use crate::corpus::CorpusConfig;
use crate::curation::{CurationConfig, Quotas, Thresholds};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, TrainConfig};
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub train_clips: usize,
    /// Held-out clips used for evaluation.
    pub test_clips: usize,
    pub classes: usize,
    pub max_events: usize,
    pub clip_duration: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { train_clips: 200, test_clips: 40, classes: 12, max_events: 4, clip_duration: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationSection {
    pub n_target: usize,
    pub q_min: f64,
    pub tau_rare: f64,
    pub tau_common: f64,
    pub adaptive: bool,
    pub quotas: Quotas,
    pub backfill: bool,
}

impl Default for CurationSection {
    fn default() -> Self {
        let t = Thresholds::default();
        Self { n_target: 160, q_min: 15.0, tau_rare: t.tau_rare, tau_common: t.tau_common, adaptive: true, quotas: Quotas::default(), backfill: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CopoSection {
    /// Number of preference pairs, each built from one training prompt.
    pub pairs: usize,
    pub steps: usize,
    pub beta: f64,
    pub lambda: f64,
    pub ema: f64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for CopoSection {
    fn default() -> Self {
        let c = CopoConfig::default();
        Self { pairs: 50, steps: c.steps, beta: c.beta, lambda: c.lambda, ema: c.ema_decay, lr: 1e-2, batch_size: 25 }
    }
}

/// Values to sweep; an empty list skips the axis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub gs: Vec<f64>,
    pub steps: Vec<usize>,
    #[serde(rename = "L")]
    pub layers: Vec<usize>,
    #[serde(rename = "F")]
    pub frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub d_model: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub heads: usize,
    #[serde(rename = "F")]
    pub frames: usize,
    #[serde(rename = "F_lat")]
    pub latent_frames: usize,
    #[serde(rename = "D")]
    pub channels: usize,
    pub max_events: usize,
    pub text_tokens: usize,
    pub blocks: usize,
    pub gs: f64,
    pub steps: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub cond_dropout: f64,
    pub noise_scale: f64,
    pub text_only: bool,
    pub threshold: f64,
    pub collar: CollarConfig,
    pub corpus: CorpusSection,
    pub curation: Option<CurationSection>,
    pub copo: Option<CopoSection>,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let flow = FlowConfig::default();
        let train = TrainConfig::default();
        Self {
            seeds: vec![0],
            d_model: 32,
            layers: 2,
            heads: flow.heads,
            frames: flow.frames,
            latent_frames: flow.latent_frames,
            channels: flow.channels,
            max_events: 4,
            text_tokens: flow.text_tokens,
            blocks: flow.blocks,
            gs: 4.0,
            steps: 50,
            lr: 1e-3,
            epochs: 20,
            batch_size: 8,
            cond_dropout: train.cond_dropout,
            noise_scale: train.noise_scale,
            text_only: false,
            threshold: DEFAULT_THRESHOLD,
            collar: CollarConfig::default(),
            corpus: CorpusSection::default(),
            curation: None,
            copo: None,
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; unknown keys are rejected by name.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.corpus.train_clips == 0 || self.corpus.test_clips == 0 {
            return Err(Error::Config("corpus needs training and test clips".into()));
        }
        if self.corpus.max_events > self.max_events {
            return Err(Error::Config(format!(
                "corpus.max_events {} exceeds the encoder capacity max_events {}",
                self.corpus.max_events, self.max_events
            )));
        }
        if self.steps == 0 || self.sweep.steps.contains(&0) {
            return Err(Error::Config("sampling steps must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("cond_dropout must lie in [0, 1]".into()));
        }
        if let Some(c) = &self.copo {
            if c.pairs == 0 || c.batch_size == 0 {
                return Err(Error::Config("copo.pairs and copo.batch_size must be positive".into()));
            }
            if !(c.beta > 0.0 && c.lambda > 0.0) || !(0.0..=1.0).contains(&c.ema) {
                return Err(Error::Config("copo needs beta, lambda > 0 and ema in [0, 1]".into()));
            }
        }
        for &l in &self.sweep.layers {
            self.flow_config(0, l, self.frames).validate()?;
        }
        for &f in &self.sweep.frames {
            self.flow_config(0, self.layers, f).validate()?;
        }
        self.flow_config(0, self.layers, self.frames).validate()
    }

    pub fn flow_config(&self, seed: u64, layers: usize, frames: usize) -> FlowConfig {
        FlowConfig {
            d_model: self.d_model,
            encoder_layers: layers,
            heads: self.heads,
            max_events: self.max_events,
            frames,
            latent_frames: self.latent_frames,
            channels: self.channels,
            text_tokens: self.text_tokens,
            blocks: self.blocks,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            cond_dropout: self.cond_dropout,
            noise_scale: self.noise_scale,
            text_only: self.text_only,
            seed,
        }
    }

    pub fn corpus_config(&self, seed: u64) -> CorpusConfig {
        CorpusConfig {
            clips: self.corpus.train_clips + self.corpus.test_clips,
            classes: self.corpus.classes,
            max_events: self.corpus.max_events,
            clip_duration: self.corpus.clip_duration,
            seed,
            ..CorpusConfig::default()
        }
    }

    pub fn curation_config(&self, seed: u64) -> Option<CurationConfig> {
        self.curation.as_ref().map(|c| CurationConfig {
            n_target: c.n_target,
            q_min: c.q_min,
            thresholds: Thresholds { tau_rare: c.tau_rare, tau_common: c.tau_common, adaptive: c.adaptive },
            quotas: c.quotas,
            backfill: c.backfill,
            seed,
        })
    }

    pub fn copo_config(&self, seed: u64) -> Option<CopoConfig> {
        self.copo.as_ref().map(|c| CopoConfig {
            beta: c.beta,
            lambda: c.lambda,
            ema_decay: c.ema,
            steps: c.steps,
            batch_size: c.batch_size,
            adam: AdamConfig { lr: c.lr, ..AdamConfig::default() },
            seed,
        })
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig { threshold: self.threshold, ..RewardConfig::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_json(r#"{"seeds": [1], "learning_rate": 0.1}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let nested = ExperimentConfig::from_json(r#"{"sweep": {"guidance": [1]}}"#).unwrap_err();
        assert!(nested.to_string().contains("guidance"), "{nested}");
    }

    #[test]
    fn short_keys_parse() {
        let cfg = ExperimentConfig::from_json(r#"{"seeds": [3], "L": 1, "F": 8, "F_lat": 32, "D": 8, "sweep": {"gs": [0, 2]}}"#).unwrap();
        assert_eq!((cfg.layers, cfg.frames, cfg.latent_frames, cfg.channels), (1, 8, 32, 8));
        assert_eq!(cfg.sweep.gs, vec![0.0, 2.0]);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_json(r#"{"seeds": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"steps": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"d_model": 30, "heads": 4}"#).is_err());
    }
}
