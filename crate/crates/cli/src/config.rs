//! Run configuration: one TOML file with `[model]`, `[synth]`, `[train]`,
//! `[weights]` and `[placement]` sections.

use std::fs;
use std::path::{Path, PathBuf};

use moelab::placement::REMOTE_PENALTY;
use moelab::{LossWeights, MoeConfig, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementOptions {
    #[serde(default = "default_shards")]
    pub shards: usize,
    #[serde(default = "default_penalty")]
    pub remote_penalty: f64,
}

fn default_shards() -> usize {
    2
}
fn default_penalty() -> f64 {
    REMOTE_PENALTY
}

impl Default for PlacementOptions {
    fn default() -> Self {
        Self { shards: default_shards(), remote_penalty: default_penalty() }
    }
}

/// Everything needed to reproduce a run. The top-level `seed` drives corpus
/// generation, initialization and batch sampling; `[weights]` is the
/// objective used by `[train]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Plant cluster structure into the embeddings before training.
    #[serde(default = "yes")]
    pub plant_embeddings: bool,
    pub model: MoeConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub placement: PlacementOptions,
}

fn yes() -> bool {
    true
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            plant_embeddings: true,
            model: MoeConfig::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            placement: PlacementOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.validate().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Copies the master seed and objective weights into the sections that
    /// consume them.
    pub fn resolved(mut self) -> Self {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.train.weights = self.weights;
        self
    }

    pub fn validate(&self) -> moelab::Result<()> {
        let section = |name: &str, r: moelab::Result<()>| r.map_err(|e| moelab::Error::Config(format!("[{name}] {e}")));
        section("model", self.model.validate())?;
        section("synth", self.synth.validate())?;
        section("train", self.train.validate())?;
        section("weights", self.weights.validate())?;
        if self.synth.vocab != self.model.vocab {
            return Err(moelab::Error::Config(format!(
                "[synth] vocab = {} must equal [model] vocab = {}",
                self.synth.vocab, self.model.vocab
            )));
        }
        let p = &self.placement;
        if p.shards == 0 || !self.model.experts.is_multiple_of(p.shards) {
            return Err(moelab::Error::Config(format!(
                "[placement] shards = {} must divide experts = {}",
                p.shards, self.model.experts
            )));
        }
        if !(p.remote_penalty >= 0.0 && p.remote_penalty.is_finite()) {
            return Err(moelab::Error::Config(format!("[placement] remote_penalty = {} must be >= 0", p.remote_penalty)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = RunConfig::parse("[model]\nexperts = 4\ntop_k = 2\nlayers = 2\nhidden = 8\nffn = 8\nvocab = 64\n").unwrap();
        assert_eq!(cfg.placement, PlacementOptions::default());
        assert_eq!(cfg.weights, LossWeights::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("seed = 1\n[model]\nexperts = \"four\"\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn resolution_syncs_seed_and_weights() {
        let cfg = RunConfig { seed: 9, weights: LossWeights::ZERO, ..RunConfig::default() }.resolved();
        assert_eq!((cfg.synth.seed, cfg.train.seed), (9, 9));
        assert_eq!(cfg.train.weights, LossWeights::ZERO);
    }
}
