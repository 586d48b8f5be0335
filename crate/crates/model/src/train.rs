//! Epoch-level trainers for both stages with checkpoint and resume support.
//!
//! Every random draw in an epoch comes from a stream keyed by
//! `(seed, epoch)`, so a resumed run repeats the exact epochs an
//! uninterrupted run would have produced.

use std::collections::BTreeMap;

use odgen_core::seed::{derive_seed, rng_for};
use odgen_core::{CityBundle, Permutation};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, Checkpoint, EpochLog, Stage};
use crate::config::{Augment, Stage2Config, Stage3Config};
use crate::diffusion::{mean_of, pooled_std, Stage3Model};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::{Archive, ParamStore};
use crate::tensor::scalar;
use crate::vae::{loss_rec, stage2_loss, Prepared, Stage2Model};

pub use crate::diffusion::TRAIN_DTYPE;

const INIT_STREAM: u64 = 0x696e_6974;
const EPOCH_STREAM: u64 = 0x6570_6f63;
const VAL_STREAM: u64 = 0x7661_6c00;

/// Shuffled batches of `size`; a trailing batch smaller than `min_last`
/// joins the previous one.
pub fn batches<R: Rng>(n: usize, size: usize, min_last: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().unwrap().len() < min_last {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn draw_perm<R: Rng>(n: usize, aug: &Augment, rng: &mut R) -> Result<Permutation> {
    // Both draws happen unconditionally so the stream does not depend on
    // the outcome.
    let coin: f64 = rng.random();
    let seed: u64 = rng.random();
    if aug.enabled && coin < aug.prob {
        Ok(Permutation::random(n, aug.intensity, seed)?)
    } else {
        Ok(Permutation::identity(n))
    }
}

fn finite_or_diverged(name: &str, v: f64, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!("{name} loss became {v} in epoch {}", epoch + 1)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct BestState {
    value: f64,
    epoch: usize,
}

fn state_archive(best: Option<BestState>, stopped: bool) -> Archive {
    let mut a = Archive::new();
    if let Some(b) = best {
        a.insert_scalar("best_value", b.value);
        a.insert_scalar("best_epoch", b.epoch as f64);
    }
    a.insert_scalar("stopped", if stopped { 1.0 } else { 0.0 });
    a
}

fn read_state(a: &Archive) -> (Option<BestState>, bool) {
    let best = match (a.scalar("best_value"), a.scalar("best_epoch")) {
        (Some(value), Some(epoch)) => Some(BestState { value, epoch: epoch as usize }),
        _ => None,
    };
    (best, a.scalar("stopped") == Some(1.0))
}

fn check_resume(ckpt: &Checkpoint, stage: Stage, config: &serde_json::Value) -> Result<()> {
    if ckpt.meta.stage != stage {
        return Err(Error::State(format!("cannot resume {} training from a {} checkpoint", stage.as_str(), ckpt.meta.stage.as_str())));
    }
    if ckpt.meta.config_hash != config_hash(config) {
        return Err(Error::State(format!(
            "config hash {} differs from the checkpoint's {}; refusing to resume",
            config_hash(config),
            ckpt.meta.config_hash
        )));
    }
    Ok(())
}

pub struct Stage2Trainer {
    cfg: Stage2Config,
    store: ParamStore,
    model: Stage2Model,
    opt: AdamW,
    history: Vec<EpochLog>,
    best: Option<BestState>,
    best_params: Option<Archive>,
    epoch: usize,
    stopped: bool,
}

impl Stage2Trainer {
    pub fn new(cfg: &Stage2Config) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(TRAIN_DTYPE, derive_seed(cfg.seed, &[INIT_STREAM]));
        let model = Stage2Model::new(&store, &cfg.arch)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            model,
            opt: AdamW::new(cfg.optim),
            history: Vec::new(),
            best: None,
            best_params: None,
            epoch: 0,
            stopped: false,
        })
    }

    pub fn resume(ckpt: &Checkpoint, cfg: &Stage2Config) -> Result<Self> {
        cfg.validate()?;
        check_resume(ckpt, Stage::Stage2, &serde_json::to_value(cfg).expect("config serialises"))?;
        let store = ParamStore::from_archive(&ckpt.archive.section("param"), TRAIN_DTYPE)?;
        let model = Stage2Model::new(&store, &cfg.arch)?;
        let opt = AdamW::from_archive(cfg.optim, &ckpt.archive.section("adam"), &store)?;
        let best_params = Some(ckpt.archive.section("best")).filter(|a| !a.is_empty());
        let (best, stopped) = read_state(&ckpt.archive.section("state"));
        Ok(Self {
            cfg: cfg.clone(),
            store,
            model,
            opt,
            history: ckpt.meta.history.clone(),
            best,
            best_params,
            epoch: ckpt.meta.epoch,
            stopped,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn model(&self) -> &Stage2Model {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn finished(&self) -> bool {
        self.stopped || self.epoch >= self.cfg.max_epochs
    }

    /// Mean reconstruction error over `cities` decoding the posterior mean.
    pub fn reconstruction_loss(model: &Stage2Model, cities: &[&CityBundle]) -> Result<f64> {
        let mut total = 0.0;
        for c in cities {
            let p = Prepared::new(c, model.downsample(), model.dtype())?;
            let (mu, _) = model.flow_encode_padded(&p.flow, p.n)?;
            total += scalar(&loss_rec(&model.flow_decode(&mu, p.n)?, &p.target)?)?;
        }
        Ok(total / cities.len().max(1) as f64)
    }

    pub fn run_epoch(&mut self, train: &[&CityBundle], val: &[&CityBundle]) -> Result<EpochLog> {
        if train.len() < 2 {
            return Err(Error::Config(format!("stage 2 needs at least 2 training cities, got {}", train.len())));
        }
        let e = self.epoch;
        let mut rng = rng_for(self.cfg.seed, &[EPOCH_STREAM, e as u64]);
        let f = self.model.downsample();
        let mut sums = [0.0f64; 4];
        for batch in batches(train.len(), self.cfg.batch_size, 2, &mut rng) {
            let mut prepared = Vec::with_capacity(batch.len());
            let mut seeds = Vec::with_capacity(batch.len());
            for &i in &batch {
                let city = train[i];
                let perm = draw_perm(city.n(), &self.cfg.augment, &mut rng)?;
                prepared.push(Prepared::new(&city.permuted(&perm)?, f, TRAIN_DTYPE)?);
                seeds.push(rng.random::<u64>());
            }
            let t = stage2_loss(&self.model, &prepared, &seeds, &self.cfg.loss)?;
            let vals = [scalar(&t.total)?, scalar(&t.rec)?, scalar(&t.con)?, scalar(&t.kl)?];
            let total = finite_or_diverged("stage-2 total", vals[0], e)?;
            let grads = t.total.backward()?;
            self.opt.step(&self.store, &grads)?;
            let w = batch.len() as f64;
            sums[0] += w * total;
            for k in 1..4 {
                sums[k] += w * vals[k];
            }
        }
        let n = train.len() as f64;
        let val_rec = if val.is_empty() {
            sums[1] / n
        } else {
            Self::reconstruction_loss(&self.model, val)?
        };
        finite_or_diverged("validation reconstruction", val_rec, e)?;
        self.epoch += 1;
        let log = EpochLog {
            epoch: self.epoch,
            losses: BTreeMap::from([
                ("total".to_string(), sums[0] / n),
                ("rec".to_string(), sums[1] / n),
                ("con".to_string(), sums[2] / n),
                ("kl".to_string(), sums[3] / n),
                ("val_rec".to_string(), val_rec),
            ]),
        };
        self.history.push(log.clone());
        if self.best.is_none_or(|b| val_rec < b.value) {
            self.best = Some(BestState { value: val_rec, epoch: self.epoch });
            self.best_params = Some(self.store.to_archive()?);
        } else if self.epoch - self.best.unwrap().epoch >= self.cfg.patience {
            self.stopped = true;
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut a = Archive::new();
        a.merge("param", &self.store.to_archive()?);
        a.merge("adam", &self.opt.to_archive()?);
        if let Some(b) = &self.best_params {
            a.merge("best", b);
        }
        a.merge("state", &state_archive(self.best, self.stopped));
        Ok(Checkpoint::new(
            Stage::Stage2,
            serde_json::to_value(&self.cfg).expect("config serialises"),
            self.epoch,
            self.finished(),
            self.history.clone(),
            a,
        ))
    }
}

/// Parameters to use for inference: the best-validation snapshot when one
/// exists, else the latest values.
pub fn inference_params(ckpt: &Checkpoint) -> Archive {
    let best = ckpt.archive.section("best");
    if best.is_empty() {
        ckpt.archive.section("param")
    } else {
        best
    }
}

/// Frozen stage-2 model from a stage-2 checkpoint.
pub fn load_stage2(ckpt: &Checkpoint) -> Result<(ParamStore, Stage2Model)> {
    if ckpt.meta.stage != Stage::Stage2 {
        return Err(Error::State("expected a stage-2 checkpoint".into()));
    }
    let cfg: Stage2Config = ckpt.config_as()?;
    let store = ParamStore::from_archive(&inference_params(ckpt), TRAIN_DTYPE)?.frozen();
    let model = Stage2Model::new(&store, &cfg.arch)?;
    Ok((store, model))
}

/// Configuration recorded in stage-3 checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Record {
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    /// Digest of the frozen stage-2 parameters.
    pub stage2_sha256: String,
}

pub struct Stage3Trainer {
    record: Stage3Record,
    s2_store: ParamStore,
    s2: Stage2Model,
    store: ParamStore,
    model: Stage3Model,
    opt: AdamW,
    history: Vec<EpochLog>,
    best: Option<BestState>,
    best_params: Option<Archive>,
    epoch: usize,
    stopped: bool,
}

impl Stage3Trainer {
    /// Starts stage 3 on top of a stage-2 checkpoint. Latent scales are
    /// set from the training cities in their given order.
    pub fn new(cfg: &Stage3Config, stage2: &Checkpoint, train: &[&CityBundle]) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Config("stage 3 needs at least one training city".into()));
        }
        let (s2_store, s2) = load_stage2(stage2)?;
        let n_max = train.iter().map(|c| c.n()).max().unwrap_or(0);
        if n_max > cfg.arch.n_max {
            return Err(Error::Capacity(format!("corpus has a city with {n_max} regions, n_max is {}", cfg.arch.n_max)));
        }
        let mut mus = Vec::with_capacity(train.len());
        let mut zcs = Vec::with_capacity(train.len());
        for c in train {
            let p = Prepared::new(c, s2.downsample(), TRAIN_DTYPE)?;
            mus.push(s2.flow_encode_padded(&p.flow, p.n)?.0);
            zcs.push(s2.mk_encode(&s2.mk_tensor(&p.features, &p.structural)?)?.t);
        }
        let latent_scale = 1.0 / pooled_std(&mus)?;
        let cond_scale = 1.0 / pooled_std(&zcs)?;
        let store = ParamStore::new(TRAIN_DTYPE, derive_seed(cfg.seed, &[INIT_STREAM]));
        let model = Stage3Model::new(&store, &cfg.arch, s2.latent_channels(), latent_scale, cond_scale)?;
        let record = Stage3Record {
            stage2: stage2.config_as()?,
            stage3: cfg.clone(),
            stage2_sha256: s2_store.digest()?,
        };
        Ok(Self {
            record,
            s2_store,
            s2,
            store,
            model,
            opt: AdamW::new(cfg.optim),
            history: Vec::new(),
            best: None,
            best_params: None,
            epoch: 0,
            stopped: false,
        })
    }

    pub fn resume(ckpt: &Checkpoint, cfg: &Stage3Config) -> Result<Self> {
        cfg.validate()?;
        let rec: Stage3Record = ckpt.config_as()?;
        let wanted = Stage3Record { stage3: cfg.clone(), ..rec.clone() };
        check_resume(ckpt, Stage::Stage3, &serde_json::to_value(&wanted).expect("config serialises"))?;
        let s2_store = ParamStore::from_archive(&ckpt.archive.section("s2"), TRAIN_DTYPE)?.frozen();
        let s2 = Stage2Model::new(&s2_store, &rec.stage2.arch)?;
        let (latent_scale, cond_scale) = read_scales(&ckpt.archive)?;
        let store = ParamStore::from_archive(&ckpt.archive.section("param"), TRAIN_DTYPE)?;
        let model = Stage3Model::new(&store, &cfg.arch, s2.latent_channels(), latent_scale, cond_scale)?;
        let opt = AdamW::from_archive(cfg.optim, &ckpt.archive.section("adam"), &store)?;
        let best_params = Some(ckpt.archive.section("best")).filter(|a| !a.is_empty());
        let (best, stopped) = read_state(&ckpt.archive.section("state"));
        Ok(Self {
            record: rec,
            s2_store,
            s2,
            store,
            model,
            opt,
            history: ckpt.meta.history.clone(),
            best,
            best_params,
            epoch: ckpt.meta.epoch,
            stopped,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn stage2_store(&self) -> &ParamStore {
        &self.s2_store
    }

    pub fn model(&self) -> &Stage3Model {
        &self.model
    }

    pub fn finished(&self) -> bool {
        self.stopped || self.epoch >= self.record.stage3.max_epochs
    }

    /// Noise-prediction error on `cities` with draws fixed per city, so
    /// values are comparable across epochs.
    pub fn validation_ldm(&self, cities: &[&CityBundle]) -> Result<f64> {
        let seed = self.record.stage3.seed;
        let mut total = 0.0;
        for (i, c) in cities.iter().enumerate() {
            let cond = self.model.condition(&self.s2, c, &Permutation::identity(c.n()))?;
            let (ldm, _) = self.model.variant_terms(&self.s2, &cond, derive_seed(seed, &[VAL_STREAM, i as u64]), None)?;
            total += scalar(&ldm)?;
        }
        Ok(total / cities.len().max(1) as f64)
    }

    pub fn run_epoch(&mut self, train: &[&CityBundle], val: &[&CityBundle]) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::Config("stage 3 needs at least one training city".into()));
        }
        let cfg = self.record.stage3.clone();
        let e = self.epoch;
        let mut rng = rng_for(cfg.seed, &[EPOCH_STREAM, e as u64]);
        let pre = (cfg.lambda_pre > 0.0).then_some(cfg.z0_clamp);
        let mut sums = [0.0f64; 3];
        for batch in batches(train.len(), cfg.batch_size, 1, &mut rng) {
            let mut ldm = Vec::new();
            let mut pres = Vec::new();
            for &i in &batch {
                let city = train[i];
                for _ in 0..cfg.variants() {
                    let perm = draw_perm(city.n(), &cfg.augment, &mut rng)?;
                    let c = self.model.condition(&self.s2, city, &perm)?;
                    let (l, p) = self.model.variant_terms(&self.s2, &c, rng.random(), pre)?;
                    ldm.push(l);
                    pres.extend(p);
                }
            }
            let ldm = mean_of(&ldm)?;
            let mut total = ldm.clone();
            let mut pre_v = 0.0;
            if !pres.is_empty() {
                let p = mean_of(&pres)?;
                pre_v = scalar(&p)?;
                total = total.add(&p.affine(cfg.lambda_pre, 0.0)?)?;
            }
            let tv = finite_or_diverged("stage-3 total", scalar(&total)?, e)?;
            let grads = total.backward()?;
            self.opt.step(&self.store, &grads)?;
            let w = batch.len() as f64;
            sums[0] += w * tv;
            sums[1] += w * scalar(&ldm)?;
            sums[2] += w * pre_v;
        }
        let n = train.len() as f64;
        let val_ldm = if val.is_empty() { sums[1] / n } else { self.validation_ldm(val)? };
        finite_or_diverged("validation noise", val_ldm, e)?;
        self.epoch += 1;
        let log = EpochLog {
            epoch: self.epoch,
            losses: BTreeMap::from([
                ("total".to_string(), sums[0] / n),
                ("ldm".to_string(), sums[1] / n),
                ("pre".to_string(), sums[2] / n),
                ("val_ldm".to_string(), val_ldm),
            ]),
        };
        self.history.push(log.clone());
        if self.best.is_none_or(|b| val_ldm < b.value) {
            self.best = Some(BestState { value: val_ldm, epoch: self.epoch });
            self.best_params = Some(self.store.to_archive()?);
        } else if self.epoch - self.best.unwrap().epoch >= cfg.patience {
            self.stopped = true;
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut a = Archive::new();
        a.merge("s2", &self.s2_store.to_archive()?);
        a.merge("param", &self.store.to_archive()?);
        a.merge("adam", &self.opt.to_archive()?);
        if let Some(b) = &self.best_params {
            a.merge("best", b);
        }
        a.merge("state", &state_archive(self.best, self.stopped));
        a.insert_scalar("scale/latent", self.model.latent_scale);
        a.insert_scalar("scale/cond", self.model.cond_scale);
        Ok(Checkpoint::new(
            Stage::Stage3,
            serde_json::to_value(&self.record).expect("config serialises"),
            self.epoch,
            self.finished(),
            self.history.clone(),
            a,
        ))
    }
}

fn read_scales(a: &Archive) -> Result<(f64, f64)> {
    match (a.scalar("scale/latent"), a.scalar("scale/cond")) {
        (Some(l), Some(c)) => Ok((l, c)),
        _ => Err(Error::State("stage-3 checkpoint lacks latent scales".into())),
    }
}

/// Frozen stage-2 and stage-3 models from a stage-3 checkpoint.
pub fn load_stage3(ckpt: &Checkpoint) -> Result<(Stage2Model, Stage3Model)> {
    if ckpt.meta.stage != Stage::Stage3 {
        return Err(Error::State("expected a stage-3 checkpoint".into()));
    }
    let rec: Stage3Record = ckpt.config_as()?;
    let s2_store = ParamStore::from_archive(&ckpt.archive.section("s2"), TRAIN_DTYPE)?.frozen();
    let s2 = Stage2Model::new(&s2_store, &rec.stage2.arch)?;
    let (latent_scale, cond_scale) = read_scales(&ckpt.archive)?;
    let store = ParamStore::from_archive(&inference_params(ckpt), TRAIN_DTYPE)?.frozen();
    let mut s3 = Stage3Model::new(&store, &rec.stage3.arch, s2.latent_channels(), latent_scale, cond_scale)?;
    s3.z0_clamp = Some(rec.stage3.z0_clamp);
    Ok((s2, s3))
}
