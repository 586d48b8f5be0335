//! Flow VAE, kernel encoder and the stage-2 losses.

use candle_core::{DType, Tensor};
use odgen_core::seed::rng_for;
use odgen_core::{CityBundle, ODMatrix, Scale};

use crate::config::{LossWeights, Stage2Arch};
use crate::error::{Error, Result};
use crate::multikernel::{median_distance, mk_tensor_from, structural_kernel, KernelMaps, MkTensor};
use crate::nn::{Conv2d, GroupNorm, Linear, ResBlock, SelfAttention};
use crate::params::{ParamStore, Scope};
use crate::tensor::{from_array2, log_softmax_last, pad_square, randn, square_mask};

const REPARAM_STREAM: u64 = 0x7265_7061;

/// Spatial latent (1, c, s, s) for a city with `n` regions.
#[derive(Debug, Clone)]
pub struct LatentMap {
    pub t: Tensor,
    pub n: usize,
}

impl LatentMap {
    pub fn side(&self) -> usize {
        self.t.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.t.dims()[1]
    }
}

pub fn latent_side(n: usize, f: usize) -> usize {
    n.div_ceil(f)
}

pub fn padded_side(n: usize, f: usize) -> usize {
    f * n.div_ceil(f)
}

/// Convolutional encoder: stem, one residual block per stage with a
/// stride-2 convolution between stages, self-attention at the bottleneck.
#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Conv2d,
    stages: Vec<(Option<Conv2d>, ResBlock)>,
    attn: SelfAttention,
    norm: GroupNorm,
    out: Conv2d,
}

impl Encoder {
    pub fn new(s: &Scope, cin: usize, widths: &[usize], cout: usize) -> Result<Self> {
        let mut stages = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let st = s.pp(format!("stage{i}"));
            let down = if i == 0 { None } else { Some(Conv2d::new(&st.pp("down"), widths[i - 1], w, 3, 2)?) };
            stages.push((down, ResBlock::new(&st.pp("res"), w, w, None)?));
        }
        let top = *widths.last().unwrap();
        Ok(Self {
            stem: Conv2d::new(&s.pp("stem"), cin, widths[0], 3, 1)?,
            stages,
            attn: SelfAttention::new(&s.pp("attn"), top)?,
            norm: GroupNorm::new(&s.pp("norm"), top)?,
            out: Conv2d::new(&s.pp("out"), top, cout, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?;
        for (down, res) in &self.stages {
            if let Some(d) = down {
                h = d.forward(&h)?;
            }
            h = res.forward(&h, None)?;
        }
        let h = self.attn.forward(&h)?;
        self.out.forward(&self.norm.forward(&h)?.silu()?)
    }
}

/// Mirror of [`Encoder`] with nearest-neighbour upsampling.
#[derive(Debug, Clone)]
pub struct Decoder {
    inp: Conv2d,
    res: ResBlock,
    attn: SelfAttention,
    stages: Vec<(Conv2d, ResBlock)>,
    norm: GroupNorm,
    out: Conv2d,
}

impl Decoder {
    pub fn new(s: &Scope, cin: usize, widths: &[usize]) -> Result<Self> {
        let top = *widths.last().unwrap();
        let mut stages = Vec::new();
        for i in (1..widths.len()).rev() {
            let st = s.pp(format!("stage{i}"));
            stages.push((
                Conv2d::new(&st.pp("up"), widths[i], widths[i - 1], 3, 1)?,
                ResBlock::new(&st.pp("res"), widths[i - 1], widths[i - 1], None)?,
            ));
        }
        Ok(Self {
            inp: Conv2d::new(&s.pp("in"), cin, top, 3, 1)?,
            res: ResBlock::new(&s.pp("res"), top, top, None)?,
            attn: SelfAttention::new(&s.pp("attn"), top)?,
            stages,
            norm: GroupNorm::new(&s.pp("norm"), widths[0])?,
            out: Conv2d::new(&s.pp("out"), widths[0], 1, 3, 1)?,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(&self.inp.forward(z)?, None)?;
        let mut h = self.attn.forward(&h)?;
        for (up, res) in &self.stages {
            h = res.forward(&up.forward(&crate::tensor::upsample2(&h)?)?, None)?;
        }
        self.out.forward(&self.norm.forward(&h)?.silu()?)
    }
}

/// One city ready for the stage-2 networks. Matrices are in log1p units.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub n: usize,
    /// (1, 1, p, p) zero-padded log flows.
    pub flow: Tensor,
    /// (n, n) log flows.
    pub target: Tensor,
    /// (n, d) region features.
    pub features: Tensor,
    /// (n, n) structural prior.
    pub structural: Tensor,
}

impl Prepared {
    pub fn new(city: &CityBundle, f: usize, dtype: DType) -> Result<Self> {
        let n = city.n();
        let log = odgen_core::log_transform(&city.od)?;
        let target = from_array2(log.values(), dtype)?;
        let sigma = median_distance(&city.regions);
        Ok(Self {
            n,
            flow: pad_square(&target.reshape((1, 1, n, n))?, padded_side(n, f))?,
            target,
            features: from_array2(city.features.vectors(), dtype)?,
            structural: from_array2(&structural_kernel(&city.regions, sigma)?, dtype)?,
        })
    }
}

/// Outputs of one stage-2 forward pass.
pub struct Stage2Out {
    pub mu: Tensor,
    pub logvar: Tensor,
    /// (n, n) reconstruction in log1p units.
    pub rec: Tensor,
    /// (1, proj) unit-norm pooled flow latent.
    pub flow_proj: Tensor,
    /// (1, proj) unit-norm pooled kernel latent.
    pub mk_proj: Tensor,
}

/// Kernel maps, flow VAE, kernel encoder and both projection heads.
#[derive(Debug, Clone)]
pub struct Stage2Model {
    pub kernels: KernelMaps,
    flow_enc: Encoder,
    mk_enc: Encoder,
    dec: Decoder,
    flow_head: Linear,
    mk_head: Linear,
    arch: Stage2Arch,
    dtype: DType,
}

impl Stage2Model {
    pub fn new(store: &ParamStore, arch: &Stage2Arch) -> Result<Self> {
        arch.validate()?;
        let s = store.root();
        let v = &arch.vae;
        let cz = v.latent_channels;
        Ok(Self {
            kernels: KernelMaps::new(&s.pp("kernels"), arch.feat_dim, &arch.kernel)?,
            flow_enc: Encoder::new(&s.pp("flow_enc"), 1, &v.channels, 2 * cz)?,
            mk_enc: Encoder::new(&s.pp("mk_enc"), arch.kernel.n_kernels + 1, &v.channels, cz)?,
            dec: Decoder::new(&s.pp("dec"), cz, &v.channels)?,
            flow_head: Linear::new(&s.pp("flow_head"), cz, v.proj_dim)?,
            mk_head: Linear::new(&s.pp("mk_head"), cz, v.proj_dim)?,
            arch: arch.clone(),
            dtype: store.dtype(),
        })
    }

    pub fn arch(&self) -> &Stage2Arch {
        &self.arch
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn downsample(&self) -> usize {
        self.arch.vae.downsample()
    }

    pub fn latent_channels(&self) -> usize {
        self.arch.vae.latent_channels
    }

    /// Posterior mean and log-variance of a log-scaled OD matrix.
    pub fn flow_encode(&self, m: &ODMatrix) -> Result<(LatentMap, LatentMap)> {
        if m.scale() != Scale::Log1p {
            return Err(Error::Core(odgen_core::Error::State("flow encoder expects a log1p matrix".into())));
        }
        let n = m.side();
        let x = from_array2(m.values(), self.dtype)?.reshape((1, 1, n, n))?;
        let (mu, logvar) = self.flow_encode_padded(&pad_square(&x, padded_side(n, self.downsample()))?, n)?;
        Ok((LatentMap { t: mu, n }, LatentMap { t: logvar, n }))
    }

    /// Encodes a padded (1, 1, p, p) input; cells outside the leading n×n
    /// block are zeroed first.
    pub fn flow_encode_padded(&self, x: &Tensor, n: usize) -> Result<(Tensor, Tensor)> {
        let p = x.dims()[3];
        if p != padded_side(n, self.downsample()) || x.dims()[2] != p {
            return Err(Error::Dimension(format!("padded input {:?} for n = {n}", x.dims())));
        }
        let h = self.flow_enc.forward(&x.broadcast_mul(&square_mask(n, p, self.dtype)?)?)?;
        let cz = self.latent_channels();
        Ok((h.narrow(1, 0, cz)?, h.narrow(1, cz, cz)?.clamp(-30.0, 20.0)?))
    }

    /// Decodes a latent to an (n, n) matrix in log1p units.
    pub fn flow_decode(&self, z: &Tensor, target_n: usize) -> Result<Tensor> {
        let f = self.downsample();
        let s = z.dims()[2];
        if z.rank() != 4 || z.dims()[3] != s || latent_side(target_n, f) != s || z.dims()[1] != self.latent_channels() {
            return Err(Error::Dimension(format!(
                "latent {:?} cannot decode to {target_n}x{target_n} (downsample {f})",
                z.dims()
            )));
        }
        let out = self.dec.forward(z)?;
        Ok(out.narrow(2, 0, target_n)?.narrow(3, 0, target_n)?.reshape((target_n, target_n))?)
    }

    pub fn mk_tensor(&self, features: &Tensor, structural: &Tensor) -> Result<MkTensor> {
        mk_tensor_from(features, structural, &self.kernels)
    }

    pub fn mk_encode(&self, k: &MkTensor) -> Result<LatentMap> {
        let want = self.arch.kernel.n_kernels + 1;
        if k.channels() != want {
            return Err(Error::Config(format!("kernel tensor has {} channels, encoder expects {want}", k.channels())));
        }
        let n = k.n();
        let p = padded_side(n, self.downsample());
        let x = pad_square(&k.tensor().unsqueeze(0)?, p)?;
        let x = x.broadcast_mul(&square_mask(n, p, self.dtype)?)?;
        Ok(LatentMap { t: self.mk_enc.forward(&x)?, n })
    }

    fn project(head: &Linear, lat: &Tensor) -> Result<Tensor> {
        let c = lat.dims()[1];
        let pooled = lat.mean_keepdim(3)?.mean_keepdim(2)?.reshape((1, c))?;
        unit_rows(&head.forward(&pooled)?)
    }

    pub fn project_flow(&self, lat: &Tensor) -> Result<Tensor> {
        Self::project(&self.flow_head, lat)
    }

    pub fn project_mk(&self, lat: &Tensor) -> Result<Tensor> {
        Self::project(&self.mk_head, lat)
    }

    /// Full stage-2 pass. With `eps_seed = None` the posterior mean is
    /// decoded instead of a sample.
    pub fn forward(&self, p: &Prepared, eps_seed: Option<u64>) -> Result<Stage2Out> {
        let (mu, logvar) = self.flow_encode_padded(&p.flow, p.n)?;
        let z = match eps_seed {
            Some(s) => reparameterize(&mu, &logvar, s)?,
            None => mu.clone(),
        };
        let rec = self.flow_decode(&z, p.n)?;
        let zc = self.mk_encode(&self.mk_tensor(&p.features, &p.structural)?)?;
        Ok(Stage2Out {
            flow_proj: self.project_flow(&mu)?,
            mk_proj: self.project_mk(&zc.t)?,
            mu,
            logvar,
            rec,
        })
    }
}

fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(1)?.affine(1.0, 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// `mu + exp(logvar / 2) * eps` with `eps` drawn from a stream fixed by `seed`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, seed: u64) -> Result<Tensor> {
    if mu.dims() != logvar.dims() {
        return Err(Error::Dimension(format!("mu {:?} vs logvar {:?}", mu.dims(), logvar.dims())));
    }
    let eps = randn(mu.dims(), &mut rng_for(seed, &[REPARAM_STREAM]), mu.dtype())?;
    Ok(mu.add(&logvar.affine(0.5, 0.0)?.exp()?.mul(&eps)?)?)
}

/// Symmetric InfoNCE over a batch of unit vectors (b, p); row i of each
/// side is the positive pair.
pub fn loss_contrastive(zs: &Tensor, zcs: &Tensor, tau_temp: f64) -> Result<Tensor> {
    let b = zs.dims2()?.0;
    if b < 2 {
        return Err(Error::Config(format!("contrastive batch of {b} needs at least 2 pairs")));
    }
    if zcs.dims() != zs.dims() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", zs.dims(), zcs.dims())));
    }
    let sim = zs.matmul(&zcs.t()?)?;
    loss_contrastive_from_sim(&sim, tau_temp)
}

/// InfoNCE from a precomputed similarity matrix.
pub fn loss_contrastive_from_sim(sim: &Tensor, tau_temp: f64) -> Result<Tensor> {
    let b = sim.dims2()?.0;
    if !(tau_temp > 0.0) {
        return Err(Error::Config("tau_temp must be positive".into()));
    }
    let logits = sim.affine(1.0 / tau_temp, 0.0)?;
    let eye = Tensor::eye(b, sim.dtype(), sim.device())?;
    let fwd = log_softmax_last(&logits)?.mul(&eye)?.sum_all()?;
    let bwd = log_softmax_last(&logits.t()?.contiguous()?)?.mul(&eye)?.sum_all()?;
    Ok(fwd.add(&bwd)?.affine(-0.5 / b as f64, 0.0)?)
}

/// Mean over latent cells of `0.5 (mu^2 + sigma^2 - 1 - log sigma^2)`.
pub fn loss_kl(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    if mu.dims() != logvar.dims() {
        return Err(Error::Dimension(format!("mu {:?} vs logvar {:?}", mu.dims(), logvar.dims())));
    }
    let t = mu.sqr()?.add(&logvar.exp()?)?.affine(1.0, -1.0)?.sub(logvar)?;
    Ok(t.mean_all()?.affine(0.5, 0.0)?)
}

/// Mean squared error over the real cells.
pub fn loss_rec(rec: &Tensor, target: &Tensor) -> Result<Tensor> {
    if rec.dims() != target.dims() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", rec.dims(), target.dims())));
    }
    Ok(rec.sub(target)?.sqr()?.mean_all()?)
}

/// Loss terms of one stage-2 batch; each is a scalar tensor.
pub struct Stage2Terms {
    pub total: Tensor,
    pub rec: Tensor,
    pub con: Tensor,
    pub kl: Tensor,
}

/// Per-city reconstruction and KL averaged over the batch plus the batch
/// contrastive term, combined as `rec + alpha con + beta kl`.
pub fn stage2_loss(model: &Stage2Model, batch: &[Prepared], seeds: &[u64], w: &LossWeights) -> Result<Stage2Terms> {
    let outs = batch
        .iter()
        .zip(seeds)
        .map(|(p, &s)| model.forward(p, Some(s)))
        .collect::<Result<Vec<_>>>()?;
    let b = outs.len() as f64;
    let mut rec = Vec::with_capacity(outs.len());
    let mut kl = Vec::with_capacity(outs.len());
    for (o, p) in outs.iter().zip(batch) {
        rec.push(loss_rec(&o.rec, &p.target)?);
        kl.push(loss_kl(&o.mu, &o.logvar)?);
    }
    let rec = Tensor::stack(&rec, 0)?.sum_all()?.affine(1.0 / b, 0.0)?;
    let kl = Tensor::stack(&kl, 0)?.sum_all()?.affine(1.0 / b, 0.0)?;
    let zs = Tensor::cat(&outs.iter().map(|o| o.flow_proj.clone()).collect::<Vec<_>>(), 0)?;
    let zcs = Tensor::cat(&outs.iter().map(|o| o.mk_proj.clone()).collect::<Vec<_>>(), 0)?;
    let con = loss_contrastive(&zs, &zcs, w.tau_temp)?;
    let total = rec.add(&con.affine(w.alpha, 0.0)?)?.add(&kl.affine(w.beta, 0.0)?)?;
    Ok(Stage2Terms { total, rec, con, kl })
}
