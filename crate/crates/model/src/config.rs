//! Architecture and training settings. Every struct deserialises with
//! defaults for missing fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamWConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub n_kernels: usize,
    pub kernel_dim: usize,
    pub hidden_dim: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { n_kernels: 8, kernel_dim: 64, hidden_dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    /// Width per encoder stage; every stage after the first halves the side.
    pub channels: Vec<usize>,
    pub latent_channels: usize,
    pub proj_dim: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { channels: vec![32, 64, 128], latent_channels: 4, proj_dim: 128 }
    }
}

impl VaeConfig {
    pub fn downsample(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

/// Architecture of the kernel maps, flow VAE and kernel encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Arch {
    pub feat_dim: usize,
    pub kernel: KernelConfig,
    pub vae: VaeConfig,
}

impl Default for Stage2Arch {
    fn default() -> Self {
        Self { feat_dim: 32, kernel: KernelConfig::default(), vae: VaeConfig::default() }
    }
}

impl Stage2Arch {
    pub fn validate(&self) -> Result<()> {
        let k = &self.kernel;
        let v = &self.vae;
        if self.feat_dim == 0 || k.n_kernels == 0 || k.kernel_dim == 0 || k.hidden_dim == 0 {
            return Err(Error::Config("feature, kernel and hidden dimensions must be positive".into()));
        }
        if v.channels.is_empty() || v.channels.len() > 5 || v.channels.contains(&0) {
            return Err(Error::Config(format!("encoder widths {:?} must be 1 to 5 positive values", v.channels)));
        }
        if v.latent_channels == 0 || v.proj_dim == 0 {
            return Err(Error::Config("latent and projection widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau_temp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 1e-3, tau_temp: 0.07 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha >= 0.0 && self.beta >= 0.0 && self.tau_temp > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights {self:?} need alpha >= 0, beta >= 0, tau_temp > 0")))
        }
    }
}

/// Random reindexing applied to training samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augment {
    pub enabled: bool,
    /// Fraction of indices shuffled in an augmented sample.
    pub intensity: f64,
    /// Probability that a sample is augmented at all.
    pub prob: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self { enabled: true, intensity: 0.5, prob: 0.5 }
    }
}

impl Augment {
    pub fn off() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.intensity) && (0.0..=1.0).contains(&self.prob) {
            Ok(())
        } else {
            Err(Error::Config("augmentation intensity and probability must lie in [0, 1]".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub arch: Stage2Arch,
    pub loss: LossWeights,
    pub optim: AdamWConfig,
    pub augment: Augment,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without a new best validation reconstruction before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            arch: Stage2Arch::default(),
            loss: LossWeights::default(),
            optim: AdamWConfig::default(),
            augment: Augment::default(),
            max_epochs: 1000,
            batch_size: 12,
            patience: 50,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("stage-2 batch size must be at least 2 for the contrastive term".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PiNetConfig {
    /// Widths at latent side s, 2s and 4s.
    pub channels: [usize; 3],
    pub time_dim: usize,
    pub perm_dim: usize,
    pub token_dim: usize,
    pub attn_dim: usize,
    pub n_max: usize,
    pub steps: usize,
}

impl Default for PiNetConfig {
    fn default() -> Self {
        Self { channels: [64, 64, 64], time_dim: 128, perm_dim: 32, token_dim: 64, attn_dim: 32, n_max: 64, steps: 1000 }
    }
}

impl PiNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.time_dim < 2 || self.perm_dim == 0 || self.token_dim == 0 || self.attn_dim < 2 {
            return Err(Error::Config("denoiser widths must be positive".into()));
        }
        if self.n_max < 2 {
            return Err(Error::Config("n_max must be at least 2".into()));
        }
        if self.steps < 2 {
            return Err(Error::Config(format!("diffusion steps T = {} must be at least 2", self.steps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage3Config {
    pub arch: PiNetConfig,
    pub optim: AdamWConfig,
    pub augment: Augment,
    pub lambda_pre: f64,
    /// Reindexed variants per city and step.
    pub n_p: usize,
    /// Bound on clean-latent estimates, in units of the latent spread, for
    /// the reindexing loss and for sampling.
    pub z0_clamp: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            arch: PiNetConfig::default(),
            optim: AdamWConfig::default(),
            augment: Augment::default(),
            lambda_pre: 0.1,
            n_p: 2,
            z0_clamp: 3.0,
            max_epochs: 1000,
            batch_size: 12,
            patience: 50,
            seed: 0,
        }
    }
}

impl Stage3Config {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        if self.lambda_pre < 0.0 || !self.lambda_pre.is_finite() {
            return Err(Error::Config("lambda_pre must be a nonnegative number".into()));
        }
        if self.n_p == 0 {
            return Err(Error::Config("n_p must be at least 1".into()));
        }
        if !(self.z0_clamp > 0.0) {
            return Err(Error::Config("z0_clamp must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch size, max_epochs and patience must be positive".into()));
        }
        Ok(())
    }

    /// Variants drawn per city in one step.
    pub fn variants(&self) -> usize {
        if self.lambda_pre > 0.0 || self.augment.enabled {
            self.n_p
        } else {
            1
        }
    }
}
