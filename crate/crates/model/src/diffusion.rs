//! Permutation tokens, the Pi-Net denoiser, stage-3 losses and generation.

use candle_core::{DType, Tensor};
use odgen_core::seed::{derive_seed, rng_for};
use odgen_core::{CityBundle, FeatureMatrix, ODMatrix, Permutation, RegionSet};
use rand::Rng;

use crate::config::PiNetConfig;
use crate::error::{Error, Result};
use crate::multikernel::{median_distance, structural_kernel};
use crate::nn::{timestep_embedding, Conv2d, CrossAttention, GroupNorm, Mlp, ResBlock};
use crate::params::{Init, ParamStore, Scope};
use crate::schedule::{ddim_loop, forward_diffuse, predict_z0, schedule_linear, NoiseSchedule, SamplerMode};
use crate::tensor::{from_array2, randn, to_array2, upsample2, DEVICE};
use crate::vae::{latent_side, padded_side, Prepared, Stage2Model};

const VARIANT_STREAM: u64 = 0x7661_7269;
const PRE_PERM_STREAM: u64 = 0x7072_6570;
const SAMPLE_STREAM: u64 = 0x7361_6d70;

/// Learnable table `E` (n_max, d_e) and the per-token projector.
#[derive(Debug, Clone)]
pub struct PermTable {
    e: Tensor,
    proj: Mlp,
}

impl PermTable {
    pub fn new(s: &Scope, cfg: &PiNetConfig) -> Result<Self> {
        Ok(Self {
            e: s.get("table", &[cfg.n_max, cfg.perm_dim], Init::Normal(1.0))?,
            proj: Mlp::new(&s.pp("proj"), cfg.perm_dim, cfg.token_dim, cfg.token_dim)?,
        })
    }

    pub fn n_max(&self) -> usize {
        self.e.dims()[0]
    }

    pub fn table(&self) -> &Tensor {
        &self.e
    }
}

/// Token `i` is `projector(E[p(i)])`; output (n, d_c).
pub fn perm_tokens(p: &Permutation, table: &PermTable) -> Result<Tensor> {
    let n = p.len();
    if n > table.n_max() {
        return Err(Error::Capacity(format!("{n} regions exceed the embedding table size {}", table.n_max())));
    }
    let ids: Vec<u32> = p.as_slice().iter().map(|&i| i as u32).collect();
    let rows = table.e.index_select(&Tensor::from_vec(ids, n, &DEVICE)?, 0)?;
    table.proj.forward(&rows)
}

/// Inverted U-Net: two ×2 upsampling stages, then two stride-2 stages back
/// with skips from the matching resolution, cross-attention after every
/// residual block.
#[derive(Debug, Clone)]
pub struct PiNet {
    temb: Mlp,
    time_dim: usize,
    conv_in: Conv2d,
    up_convs: [Conv2d; 2],
    down_convs: [Conv2d; 2],
    res: [ResBlock; 5],
    attn: [CrossAttention; 5],
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl PiNet {
    pub fn new(s: &Scope, cfg: &PiNetConfig, cz: usize) -> Result<Self> {
        let [c0, c1, c2] = cfg.channels;
        let td = Some(cfg.time_dim);
        let ca = |name: &str, c: usize| CrossAttention::new(&s.pp(name), c, cfg.token_dim, cfg.attn_dim);
        Ok(Self {
            temb: Mlp::new(&s.pp("temb"), cfg.time_dim, cfg.time_dim, cfg.time_dim)?,
            time_dim: cfg.time_dim,
            conv_in: Conv2d::new(&s.pp("in"), 2 * cz, c0, 3, 1)?,
            up_convs: [Conv2d::new(&s.pp("up1"), c0, c1, 3, 1)?, Conv2d::new(&s.pp("up2"), c1, c2, 3, 1)?],
            down_convs: [Conv2d::new(&s.pp("down1"), c2, c1, 3, 2)?, Conv2d::new(&s.pp("down2"), c1, c0, 3, 2)?],
            res: [
                ResBlock::new(&s.pp("res0"), c0, c0, td)?,
                ResBlock::new(&s.pp("res1"), c1, c1, td)?,
                ResBlock::new(&s.pp("res2"), c2, c2, td)?,
                ResBlock::new(&s.pp("res3"), 2 * c1, c1, td)?,
                ResBlock::new(&s.pp("res4"), 2 * c0, c0, td)?,
            ],
            attn: [ca("attn0", c0)?, ca("attn1", c1)?, ca("attn2", c2)?, ca("attn3", c1)?, ca("attn4", c0)?],
            norm_out: GroupNorm::new(&s.pp("norm_out"), c0)?,
            conv_out: Conv2d::new(&s.pp("out"), c0, cz, 3, 1)?,
        })
    }

    pub fn cross_attention(&self) -> &[CrossAttention; 5] {
        &self.attn
    }

    /// Noise estimate for `z_t` given the kernel latent, tokens and step.
    /// `region_side` is the padded matrix side the latent covers.
    pub fn forward(&self, z_t: &Tensor, z_c: &Tensor, tokens: &Tensor, t: usize, region_side: usize) -> Result<Tensor> {
        if z_t.dims() != z_c.dims() || z_t.rank() != 4 {
            return Err(Error::Dimension(format!("z_t {:?} vs z_c {:?}", z_t.dims(), z_c.dims())));
        }
        let emb = self.temb.forward(&timestep_embedding(t, self.time_dim, z_t.dtype())?)?;
        let e = Some(&emb);
        let h = self.conv_in.forward(&Tensor::cat(&[z_t, z_c], 1)?)?;
        let skip0 = self.attn[0].forward(&self.res[0].forward(&h, e)?, tokens, region_side)?;
        let h = self.up_convs[0].forward(&upsample2(&skip0)?)?;
        let skip1 = self.attn[1].forward(&self.res[1].forward(&h, e)?, tokens, region_side)?;
        let h = self.up_convs[1].forward(&upsample2(&skip1)?)?;
        let h = self.attn[2].forward(&self.res[2].forward(&h, e)?, tokens, region_side)?;
        let h = self.down_convs[0].forward(&h)?;
        let h = self.res[3].forward(&Tensor::cat(&[&h, &skip1], 1)?, e)?;
        let h = self.attn[3].forward(&h, tokens, region_side)?;
        let h = self.down_convs[1].forward(&h)?;
        let h = self.res[4].forward(&Tensor::cat(&[&h, &skip0], 1)?, e)?;
        let h = self.attn[4].forward(&h, tokens, region_side)?;
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

/// Conditions and targets for one (city, permutation) pair. Latents are in
/// diffusion units (multiplied by the stored scales).
#[derive(Debug, Clone)]
pub struct Conditioned {
    pub n: usize,
    pub perm: Permutation,
    pub z0: Tensor,
    pub zc: Tensor,
    /// (n, n) log flows of the permuted city.
    pub target: Tensor,
}

/// Denoiser, permutation table, schedule and latent scales.
#[derive(Debug, Clone)]
pub struct Stage3Model {
    pub pinet: PiNet,
    pub perm: PermTable,
    pub sched: NoiseSchedule,
    pub latent_scale: f64,
    pub cond_scale: f64,
    /// Bound applied to every clean-latent estimate while sampling.
    pub z0_clamp: Option<f64>,
    cfg: PiNetConfig,
}

impl Stage3Model {
    pub fn new(store: &ParamStore, cfg: &PiNetConfig, cz: usize, latent_scale: f64, cond_scale: f64) -> Result<Self> {
        cfg.validate()?;
        let s = store.root();
        Ok(Self {
            pinet: PiNet::new(&s.pp("pinet"), cfg, cz)?,
            perm: PermTable::new(&s.pp("perm"), cfg)?,
            sched: schedule_linear(cfg.steps)?,
            latent_scale,
            cond_scale,
            z0_clamp: None,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &PiNetConfig {
        &self.cfg
    }

    /// Kernel latent in diffusion units for an already permuted city.
    pub fn kernel_condition(&self, s2: &Stage2Model, features: &Tensor, structural: &Tensor) -> Result<Tensor> {
        let zc = s2.mk_encode(&s2.mk_tensor(features, structural)?)?;
        Ok(zc.t.affine(self.cond_scale, 0.0)?.detach())
    }

    pub fn condition(&self, s2: &Stage2Model, city: &CityBundle, perm: &Permutation) -> Result<Conditioned> {
        let n = city.n();
        if n > self.perm.n_max() {
            return Err(Error::Capacity(format!("{} has {n} regions, limit is {}", city.city_id, self.perm.n_max())));
        }
        let c = city.permuted(perm)?;
        let p = Prepared::new(&c, s2.downsample(), s2.dtype())?;
        let (mu, _) = s2.flow_encode_padded(&p.flow, n)?;
        Ok(Conditioned {
            n,
            perm: perm.clone(),
            z0: mu.affine(self.latent_scale, 0.0)?.detach(),
            zc: self.kernel_condition(s2, &p.features, &p.structural)?,
            target: p.target,
        })
    }

    pub fn predict(&self, z_t: &Tensor, zc: &Tensor, tokens: &Tensor, t: usize, n: usize, f: usize) -> Result<Tensor> {
        self.pinet.forward(z_t, zc, tokens, t, padded_side(n, f))
    }

    /// Noise-prediction error and, when a clamp is given in `pre`, the
    /// decoded one-step reconstruction error.
    pub fn variant_terms(
        &self,
        s2: &Stage2Model,
        c: &Conditioned,
        seed: u64,
        pre: Option<f64>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let mut rng = rng_for(seed, &[VARIANT_STREAM]);
        let t = rng.random_range(1..=self.sched.steps());
        let eps = randn(c.z0.dims(), &mut rng, c.z0.dtype())?;
        let z_t = forward_diffuse(&c.z0, t, &eps, &self.sched)?;
        let tokens = perm_tokens(&c.perm, &self.perm)?;
        let eps_hat = self.predict(&z_t, &c.zc, &tokens, t, c.n, s2.downsample())?;
        let ldm = eps_hat.sub(&eps)?.sqr()?.mean_all()?;
        let pre = match pre {
            Some(clamp) => {
                let z0 = predict_z0(&z_t, &eps_hat, t, &self.sched)?.clamp(-clamp, clamp)?;
                let rec = s2.flow_decode(&z0.affine(1.0 / self.latent_scale, 0.0)?, c.n)?;
                Some(rec.sub(&c.target)?.sqr()?.mean_all()?)
            }
            None => None,
        };
        Ok((ldm, pre))
    }

    /// Mean noise-prediction error over `batch`, one draw of (t, eps) each.
    pub fn loss_ldm(&self, s2: &Stage2Model, batch: &[Conditioned], seed: u64) -> Result<Tensor> {
        let terms = batch
            .iter()
            .enumerate()
            .map(|(i, c)| Ok(self.variant_terms(s2, c, derive_seed(seed, &[i as u64]), None)?.0))
            .collect::<Result<Vec<_>>>()?;
        mean_of(&terms)
    }

    /// `lambda_pre` times the mean decoded error over `n_p` random
    /// reindexings of every city at `intensity`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_pre(
        &self,
        s2: &Stage2Model,
        cities: &[&CityBundle],
        n_p: usize,
        lambda_pre: f64,
        intensity: f64,
        clamp: f64,
        seed: u64,
    ) -> Result<Tensor> {
        if n_p == 0 {
            return Err(Error::Config("n_p must be at least 1".into()));
        }
        let mut terms = Vec::new();
        for (i, city) in cities.iter().enumerate() {
            for k in 0..n_p {
                let ps = derive_seed(seed, &[PRE_PERM_STREAM, i as u64, k as u64]);
                let perm = Permutation::random(city.n(), intensity, ps)?;
                let c = self.condition(s2, city, &perm)?;
                let vs = derive_seed(seed, &[i as u64, k as u64]);
                terms.push(self.variant_terms(s2, &c, vs, Some(clamp))?.1.expect("requested"));
            }
        }
        Ok(mean_of(&terms)?.affine(lambda_pre, 0.0)?)
    }

    /// DDIM sample in diffusion units from a seeded Gaussian start.
    #[allow(clippy::too_many_arguments)]
    pub fn ddim_sample(
        &self,
        zc: &Tensor,
        tokens: &Tensor,
        n: usize,
        f: usize,
        tau_steps: usize,
        mode: SamplerMode,
        seed: u64,
    ) -> Result<Tensor> {
        let z_t = randn(zc.dims(), &mut rng_for(seed, &[SAMPLE_STREAM]), zc.dtype())?;
        ddim_loop(z_t, &self.sched, tau_steps, mode, |z, t| {
            let eps = self.predict(z, zc, tokens, t, n, f)?;
            match self.z0_clamp {
                Some(c) => clamped_eps(z, &eps, t, c, &self.sched),
                None => Ok(eps),
            }
        })
    }
}

/// Noise estimate consistent with the clean-latent estimate clamped to
/// `[-c, c]`; unchanged wherever the estimate already lies inside.
pub fn clamped_eps(z_t: &Tensor, eps: &Tensor, t: usize, c: f64, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t);
    let z0 = predict_z0(z_t, eps, t, sched)?;
    let inside = z0.abs()?.le(c)?;
    let moved = z_t.sub(&z0.clamp(-c, c)?.affine(ab.sqrt(), 0.0)?)?.affine(1.0 / (1.0 - ab).sqrt(), 0.0)?;
    Ok(inside.where_cond(eps, &moved)?)
}

pub(crate) fn mean_of(terms: &[Tensor]) -> Result<Tensor> {
    if terms.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    Ok(Tensor::stack(terms, 0)?.sum_all()?.affine(1.0 / terms.len() as f64, 0.0)?)
}

/// Largest decoded log value passed to `expm1`, keeping outputs finite.
const MAX_LOG_FLOW: f64 = 30.0;

/// Generates a raw OD matrix for the city reindexed by `p`; the output is
/// indexed like the permuted inputs.
#[allow(clippy::too_many_arguments)]
pub fn generate_od(
    s2: &Stage2Model,
    s3: &Stage3Model,
    features: &FeatureMatrix,
    regions: &RegionSet,
    p: &Permutation,
    tau_steps: usize,
    mode: SamplerMode,
    seed: u64,
) -> Result<ODMatrix> {
    let n = regions.len();
    if features.rows() != n || p.len() != n {
        return Err(Error::Dimension(format!(
            "{} feature rows, {n} regions, permutation of {}",
            features.rows(),
            p.len()
        )));
    }
    if n > s3.perm.n_max() {
        return Err(Error::Capacity(format!("{n} regions exceed the limit of {}", s3.perm.n_max())));
    }
    let dtype = s2.dtype();
    let f = features.permuted(p)?;
    let r = regions.permuted(p)?;
    let x = from_array2(f.vectors(), dtype)?;
    let sk = from_array2(&structural_kernel(&r, median_distance(&r))?, dtype)?;
    let zc = s3.kernel_condition(s2, &x, &sk)?;
    debug_assert_eq!(zc.dims()[2], latent_side(n, s2.downsample()));
    let tokens = perm_tokens(p, &s3.perm)?;
    let z0 = s3.ddim_sample(&zc, &tokens, n, s2.downsample(), tau_steps, mode, seed)?;
    let log = s2.flow_decode(&z0.affine(1.0 / s3.latent_scale, 0.0)?, n)?;
    let log = to_array2(&log)?.mapv(|v| if v.is_finite() { v.min(MAX_LOG_FLOW) } else { 0.0 });
    Ok(ODMatrix::raw(log.mapv(|v| v.exp_m1().max(0.0)))?)
}

/// Trained stage-2 and stage-3 models packaged as a flow generator.
pub struct OdGenerator {
    pub s2: Stage2Model,
    pub s3: Stage3Model,
    pub tau_steps: usize,
    pub mode: SamplerMode,
    pub label: String,
}

impl odgen_core::FlowGenerator for OdGenerator {
    fn generate(&self, city: &CityBundle, perm: &Permutation, seed: u64) -> odgen_core::Result<ODMatrix> {
        generate_od(&self.s2, &self.s3, &city.features, &city.regions, perm, self.tau_steps, self.mode, seed)
            .map_err(Error::into_core)
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// Standard deviation of all entries of `ts`, for latent scaling.
pub fn pooled_std(ts: &[Tensor]) -> Result<f64> {
    let mut vals = Vec::new();
    for t in ts {
        vals.extend(crate::tensor::to_f64_vec(t)?);
    }
    if vals.len() < 2 {
        return Ok(1.0);
    }
    let m = odgen_core::metrics::order_free_sum(vals.iter().copied()) / vals.len() as f64;
    let v = odgen_core::metrics::order_free_sum(vals.iter().map(|x| (x - m).powi(2))) / vals.len() as f64;
    Ok(if v > 0.0 { v.sqrt() } else { 1.0 })
}

/// Tensor dtype used for training.
pub const TRAIN_DTYPE: DType = DType::F32;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{from_f64, to_f64_vec};

    fn tiny() -> PiNetConfig {
        PiNetConfig { channels: [8, 8, 8], time_dim: 16, perm_dim: 4, token_dim: 6, attn_dim: 4, n_max: 12, steps: 50 }
    }

    #[test]
    fn identity_tokens_are_projected_rows_in_order() {
        let store = ParamStore::new(DType::F64, 1);
        let t = PermTable::new(&store.root(), &tiny()).unwrap();
        let tok = to_f64_vec(&perm_tokens(&Permutation::identity(5), &t).unwrap()).unwrap();
        let direct = to_f64_vec(&t.proj.forward(&t.e.narrow(0, 0, 5).unwrap()).unwrap()).unwrap();
        assert_eq!(tok, direct);
        let p = Permutation::new(vec![2, 0, 1, 4, 3]).unwrap();
        let tp = to_f64_vec(&perm_tokens(&p, &t).unwrap()).unwrap();
        for i in 0..5 {
            assert_eq!(&tp[6 * i..6 * i + 6], &direct[6 * p.get(i)..6 * p.get(i) + 6]);
        }
        let err = perm_tokens(&Permutation::identity(13), &t).unwrap_err();
        assert_eq!(err.category(), "capacity");
    }

    #[test]
    fn pinet_shapes_and_timestep_sensitivity() {
        let store = ParamStore::new(DType::F32, 2);
        let cfg = tiny();
        let net = PiNet::new(&store.root(), &cfg, 2).unwrap();
        let table = PermTable::new(&store.root().pp("perm"), &cfg).unwrap();
        let mut rng = rng_for(3, &[]);
        for s in [2usize, 3, 4, 8] {
            let n = (4 * s).min(cfg.n_max);
            let zt = randn(&[1, 2, s, s], &mut rng, DType::F32).unwrap();
            let zc = randn(&[1, 2, s, s], &mut rng, DType::F32).unwrap();
            let tok = perm_tokens(&Permutation::identity(n), &table).unwrap();
            let a = net.forward(&zt, &zc, &tok, 1, 4 * s).unwrap();
            assert_eq!(a.dims(), zt.dims());
            let b = net.forward(&zt, &zc, &tok, cfg.steps, 4 * s).unwrap();
            let diff = to_f64_vec(&a.sub(&b).unwrap().abs().unwrap()).unwrap();
            assert!(diff.iter().cloned().fold(0.0, f64::max) > 0.0);
        }
        let zt = from_f64(vec![0.0; 8], &[1, 2, 2, 2], DType::F32).unwrap();
        let zc = from_f64(vec![0.0; 18], &[1, 2, 3, 3], DType::F32).unwrap();
        let tok = perm_tokens(&Permutation::identity(8), &table).unwrap();
        assert_eq!(net.forward(&zt, &zc, &tok, 1, 8).unwrap_err().category(), "dimension");
    }
}
