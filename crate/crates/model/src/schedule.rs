//! Noise schedule, closed-form forward process and the DDIM sampler loop.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Linear betas from 1e-4 to 0.02 over `t_steps` steps.
pub fn schedule_linear(t_steps: usize) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        return Err(Error::Config(format!("schedule needs T >= 2, got {t_steps}")));
    }
    let betas: Vec<f64> = (0..t_steps)
        .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (t_steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for 1 ≤ t ≤ T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for 0 ≤ t ≤ T, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Input(format!("timestep {t} outside 1..={}", self.steps())))
        } else {
            Ok(())
        }
    }
}

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    if z0.dims() != eps.dims() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", z0.dims(), eps.dims())));
    }
    let ab = sched.alpha_bar(t);
    Ok(z0.affine(ab.sqrt(), 0.0)?.add(&eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// Clean-latent estimate `(z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn predict_z0(z_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    Ok(z_t.sub(&eps_hat.affine((1.0 - ab).sqrt(), 0.0)?)?.affine(1.0 / ab.sqrt(), 0.0)?)
}

/// One deterministic DDIM move from `t` to `t_prev`; returns
/// `(z_{t_prev}, z0_hat)`.
pub fn ddim_update(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<(Tensor, Tensor)> {
    if t_prev >= t {
        return Err(Error::Input(format!("DDIM step must go backwards, got {t} -> {t_prev}")));
    }
    let z0 = predict_z0(z_t, eps_hat, t, sched)?;
    let ab = sched.alpha_bar(t_prev);
    let z = z0.affine(ab.sqrt(), 0.0)?.add(&eps_hat.affine((1.0 - ab).sqrt(), 0.0)?)?;
    Ok((z, z0))
}

/// Per-step posterior-mean update applied with a stride, as written in the
/// generation pseudocode.
pub fn literal_update(z_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    let a = sched.alpha(t);
    let c = (1.0 - a) / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(z_t.sub(&eps_hat.affine(c, 0.0)?)?.affine(1.0 / a.sqrt(), 0.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    #[default]
    Ddim,
    /// Compatibility mode reproducing the pseudocode update verbatim.
    Literal,
}

/// Visited timesteps `T, T - d, .., T - (tau - 1) d` with `d = floor(T / tau)`.
pub fn ddim_timesteps(t_steps: usize, tau_steps: usize) -> Result<Vec<usize>> {
    if tau_steps == 0 || tau_steps > t_steps {
        return Err(Error::Config(format!("tau_steps {tau_steps} outside 1..={t_steps}")));
    }
    let d = t_steps / tau_steps;
    Ok((0..tau_steps).map(|k| t_steps - k * d).collect())
}

/// Runs the sampler from `z_t_init` with a caller-supplied noise predictor
/// `denoise(z_t, t)`. DDIM mode returns the final clean-latent estimate.
pub fn ddim_loop<F>(
    z_t_init: Tensor,
    sched: &NoiseSchedule,
    tau_steps: usize,
    mode: SamplerMode,
    mut denoise: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let ts = ddim_timesteps(sched.steps(), tau_steps)?;
    let d = sched.steps() / tau_steps;
    let mut z = z_t_init;
    for (k, &t) in ts.iter().enumerate() {
        let eps = denoise(&z, t)?;
        match mode {
            SamplerMode::Ddim => {
                let (next, z0) = ddim_update(&z, &eps, t, t - d, sched)?;
                if k + 1 == ts.len() {
                    return Ok(z0);
                }
                z = next;
            }
            SamplerMode::Literal => z = literal_update(&z, &eps, t, sched)?,
        }
    }
    Ok(z)
}
