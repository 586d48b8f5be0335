//! Experiment configuration shared by every subcommand.

use std::path::Path;

use odgen_core::io::read_json;
use odgen_core::metrics::EvalOptions;
use odgen_core::CorpusConfig;
use odgen_model::config::{Stage2Config, Stage3Config};
use odgen_model::schedule::SamplerMode;
use odgen_model::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub tau_steps: usize,
    pub mode: SamplerMode,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { tau_steps: 50, mode: SamplerMode::Ddim }
    }
}

/// Every tunable of a run. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Seed for sampling and evaluation draws.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub sampling: SamplingConfig,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            sampling: SamplingConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(read_json(path)?)
    }

    /// Overrides every component seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.stage2.seed = seed;
        self.stage3.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.stage2.validate()?;
        self.stage3.validate()?;
        let t = self.stage3.arch.steps;
        if self.sampling.tau_steps == 0 || self.sampling.tau_steps > t {
            return Err(Error::Config(format!("sampling.tau_steps {} outside 1..={t}", self.sampling.tau_steps)));
        }
        if self.eval.bins == 0 {
            return Err(Error::Config("eval.bins must be positive".into()));
        }
        Ok(())
    }
}
