//! Subcommand implementations. Each takes the resolved experiment config
//! and its own flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use log::info;
use odgen_core::io::{atomic_write, format_matrix_csv, import_cities, read_corpus, read_json, read_matrix_csv, write_corpus, write_json, CityManifest};
use odgen_core::metrics::evaluate_with;
use odgen_core::robustness::{evaluate_generator, generation_seed, perm_robustness};
use odgen_core::{generate_corpus, gravity_fit_cities, CityBundle, Corpus, DecayForm, FeatureMatrix, FlowGenerator, ODMatrix, Permutation, RegionSet, SplitName};
use odgen_model::checkpoint::{Checkpoint, Stage};
use odgen_model::diffusion::{generate_od, OdGenerator};
use odgen_model::schedule::SamplerMode;
use odgen_model::train::{load_stage3, Stage2Trainer, Stage3Trainer};
use odgen_model::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::report::{
    metrics_summary, perm_summary, write_report, CityMetrics, MetricsReportFile, PermTableFile, METRICS_SCHEMA_ID,
    PERM_SCHEMA_ID, REPORT_FORMAT_VERSION,
};

#[derive(Debug, Clone, Args)]
pub struct GenCorpusArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of synthetic cities
    #[arg(long)]
    pub cities: Option<usize>,
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Copy cities from an existing directory instead of generating them
    #[arg(long)]
    pub import: Option<PathBuf>,
    /// Replace a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint directory, rewritten after every epoch
    #[arg(long)]
    pub out: PathBuf,
    /// Upper bound on total epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from the checkpoint in --out
    #[arg(long)]
    pub resume: bool,
    /// Start over even if --out holds a checkpoint
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainDiffArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Stage-2 checkpoint directory
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub lambda_pre: Option<f64>,
    /// Disable random reindexing of training samples
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ddim,
    Literal,
}

impl From<ModeArg> for SamplerMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ddim => SamplerMode::Ddim,
            ModeArg::Literal => SamplerMode::Literal,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    /// Stage-3 checkpoint directory
    #[arg(long)]
    pub model: PathBuf,
    /// City directory with manifest.json, features.csv and centroids.csv
    #[arg(long)]
    pub city: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub perm_seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub perm_intensity: f64,
    #[arg(long)]
    pub tau_steps: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Output matrix path; provenance goes next to it
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    /// Gravity model with power-law decay
    GravityPower,
    /// Gravity model with exponential decay
    GravityExp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Val => SplitName::Val,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GeneratorArgs {
    /// Stage-3 checkpoint directory
    #[arg(long, conflicts_with = "baseline")]
    pub model: Option<PathBuf>,
    /// Baseline fitted on the corpus training split
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub tau_steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Predicted od.csv
    #[arg(long, requires = "truth")]
    pub pred: Option<PathBuf>,
    /// Ground-truth od.csv
    #[arg(long, requires = "pred")]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub generator: GeneratorArgs,
    /// JSON report path; a text summary is written with a .txt extension
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PermTestArgs {
    #[command(flatten)]
    pub generator: GeneratorArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.3, 0.5, 0.8, 1.0])]
    pub intensities: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
    pub seeds: Vec<u64>,
    /// JSON table path; a text summary is written with a .txt extension
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_corpus(cfg: &ExperimentConfig, args: &GenCorpusArgs) -> Result<Corpus> {
    let (corpus, generator) = match &args.import {
        Some(src) => (import_cities(src)?, None),
        None => {
            let mut c = cfg.corpus.clone();
            c.n_cities = args.cities.unwrap_or(c.n_cities);
            c.n_min = args.n_min.unwrap_or(c.n_min);
            c.n_max = args.n_max.unwrap_or(c.n_max);
            (generate_corpus(&c)?, Some(c))
        }
    };
    write_corpus(&args.out, &corpus, generator.as_ref(), args.force)?;
    let count = |s| corpus.split.ids(s).len();
    info!(
        "wrote {} cities to {} (train {}, val {}, test {})",
        corpus.cities.len(),
        args.out.display(),
        count(SplitName::Train),
        count(SplitName::Val),
        count(SplitName::Test)
    );
    Ok(corpus)
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Ok(read_corpus(dir)?.0)
}

fn feature_dim(corpus: &Corpus) -> Result<usize> {
    let d = corpus.cities.first().map(|c| c.features.dim()).ok_or_else(|| Error::Input("corpus has no cities".into()))?;
    if corpus.cities.iter().any(|c| c.features.dim() != d) {
        return Err(Error::Input("cities disagree on the feature dimension".into()));
    }
    Ok(d)
}

/// Decides whether to resume from `out`. Returns the loaded checkpoint.
fn prepare_out(args: &TrainArgs) -> Result<Option<Checkpoint>> {
    let exists = args.out.join(odgen_model::checkpoint::META_FILE).exists();
    if args.resume {
        if !exists {
            return Err(Error::State(format!("--resume given but {} holds no checkpoint", args.out.display())));
        }
        return Ok(Some(Checkpoint::load(&args.out)?));
    }
    if args.out.exists() && fs::read_dir(&args.out).map(|mut d| d.next().is_some()).unwrap_or(false) && !args.force {
        return Err(Error::State(format!(
            "{} is not empty; pass --resume to continue or --force to start over",
            args.out.display()
        )));
    }
    Ok(None)
}

trait Trainer {
    fn finished(&self) -> bool;
    fn epoch(&self) -> usize;
    fn step(&mut self, train: &[&CityBundle], val: &[&CityBundle]) -> Result<String>;
    fn checkpoint(&self) -> Result<Checkpoint>;
}

impl Trainer for Stage2Trainer {
    fn finished(&self) -> bool {
        Stage2Trainer::finished(self)
    }
    fn epoch(&self) -> usize {
        Stage2Trainer::epoch(self)
    }
    fn step(&mut self, train: &[&CityBundle], val: &[&CityBundle]) -> Result<String> {
        let l = self.run_epoch(train, val)?.losses;
        Ok(format!("total {:.4} rec {:.4} con {:.4} kl {:.4} val_rec {:.4}", l["total"], l["rec"], l["con"], l["kl"], l["val_rec"]))
    }
    fn checkpoint(&self) -> Result<Checkpoint> {
        Stage2Trainer::checkpoint(self)
    }
}

impl Trainer for Stage3Trainer {
    fn finished(&self) -> bool {
        Stage3Trainer::finished(self)
    }
    fn epoch(&self) -> usize {
        Stage3Trainer::epoch(self)
    }
    fn step(&mut self, train: &[&CityBundle], val: &[&CityBundle]) -> Result<String> {
        let l = self.run_epoch(train, val)?.losses;
        Ok(format!("total {:.4} ldm {:.4} pre {:.4} val_ldm {:.4}", l["total"], l["ldm"], l["pre"], l["val_ldm"]))
    }
    fn checkpoint(&self) -> Result<Checkpoint> {
        Stage3Trainer::checkpoint(self)
    }
}

/// Runs epochs until the trainer stops, saving after each one. A failure
/// removes a checkpoint directory created by this call.
fn drive(t: &mut dyn Trainer, corpus: &Corpus, cfg: &ExperimentConfig, args: &TrainArgs, resumed: bool) -> Result<Checkpoint> {
    let train = corpus.split_cities(SplitName::Train);
    let val = corpus.split_cities(SplitName::Val);
    let experiment = serde_json::to_value(cfg).expect("config serialises");
    let mut ck = t.checkpoint()?;
    let mut created = false;
    while !t.finished() {
        match t.step(&train, &val) {
            Ok(line) => info!("epoch {}: {line}", t.epoch()),
            Err(e) => {
                if created && !resumed {
                    let _ = fs::remove_dir_all(&args.out);
                }
                return Err(e);
            }
        }
        ck = t.checkpoint()?;
        ck.meta.experiment = Some(experiment.clone());
        ck.save(&args.out)?;
        created = true;
    }
    Ok(ck)
}

pub fn train_vae(cfg: &ExperimentConfig, args: &TrainArgs) -> Result<Checkpoint> {
    let corpus = load_corpus(&args.corpus)?;
    let mut s2 = cfg.stage2.clone();
    s2.arch.feat_dim = feature_dim(&corpus)?;
    if let Some(e) = args.epochs {
        s2.max_epochs = e;
    }
    let prior = prepare_out(args)?;
    let resumed = prior.is_some();
    let mut t = match prior {
        Some(ck) => {
            ck.expect_stage(Stage::Stage2, &args.out)?;
            info!("resuming stage 2 at epoch {}", ck.meta.epoch);
            Stage2Trainer::resume(&ck, &s2)?
        }
        None => Stage2Trainer::new(&s2)?,
    };
    drive(&mut t, &corpus, cfg, args, resumed)
}

pub fn train_diff(cfg: &ExperimentConfig, args: &TrainDiffArgs) -> Result<Checkpoint> {
    let corpus = load_corpus(&args.train.corpus)?;
    let mut s3 = cfg.stage3.clone();
    if let Some(e) = args.train.epochs {
        s3.max_epochs = e;
    }
    if let Some(l) = args.lambda_pre {
        s3.lambda_pre = l;
    }
    if args.no_augment {
        s3.augment.enabled = false;
    }
    s3.validate()?;
    let prior = prepare_out(&args.train)?;
    let resumed = prior.is_some();
    let mut t = match prior {
        Some(ck) => {
            ck.expect_stage(Stage::Stage3, &args.train.out)?;
            info!("resuming stage 3 at epoch {}", ck.meta.epoch);
            Stage3Trainer::resume(&ck, &s3)?
        }
        None => {
            let vae = Checkpoint::load(&args.vae)?;
            vae.expect_stage(Stage::Stage2, &args.vae)?;
            Stage3Trainer::new(&s3, &vae, &corpus.split_cities(SplitName::Train))?
        }
    };
    drive(&mut t, &corpus, cfg, &args.train, resumed)
}

fn load_model(path: &Path, cfg: &ExperimentConfig, tau: Option<usize>, mode: Option<SamplerMode>) -> Result<(OdGenerator, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_stage(Stage::Stage3, path)?;
    let (s2, s3) = load_stage3(&ck)?;
    let g = OdGenerator {
        s2,
        s3,
        tau_steps: tau.unwrap_or(cfg.sampling.tau_steps),
        mode: mode.unwrap_or(cfg.sampling.mode),
        label: format!("model:{}", &ck.meta.model_sha256[..16]),
    };
    Ok((g, ck))
}

/// Generation provenance stored next to a sampled matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub format_version: u32,
    pub city_id: String,
    pub n: usize,
    pub model_sha256: String,
    pub config_hash: String,
    pub seed: u64,
    pub sampling_seed: u64,
    pub perm_seed: u64,
    pub perm_intensity: f64,
    /// Reindexing applied to the inputs; the written matrix is mapped back
    /// to the city's own region order.
    pub permutation: Vec<usize>,
    pub identity: bool,
    pub tau_steps: usize,
    pub mode: SamplerMode,
}

pub fn provenance_path(out: &Path) -> PathBuf {
    out.with_extension("provenance.json")
}

/// Reads a city directory; `od.csv` is not needed.
fn read_city_inputs(dir: &Path) -> Result<(CityManifest, FeatureMatrix, RegionSet)> {
    let manifest: CityManifest = read_json(&dir.join("manifest.json"))?;
    let fpath = dir.join("features.csv");
    let cpath = dir.join("centroids.csv");
    let f = read_matrix_csv(&fpath)?;
    let c = read_matrix_csv(&cpath)?;
    if f.dim() != (manifest.n, manifest.d) {
        return Err(odgen_core::Error::Load { path: fpath, reason: format!("shape {:?} does not match the manifest", f.dim()) }.into());
    }
    if c.dim() != (manifest.n, 2) {
        return Err(odgen_core::Error::Load { path: cpath, reason: format!("shape {:?} does not match the manifest", c.dim()) }.into());
    }
    let regions = RegionSet::with_generated_ids(&manifest.city_id, c.rows().into_iter().map(|r| [r[0], r[1]]).collect())?;
    Ok((manifest, FeatureMatrix::new(f)?, regions))
}

pub fn sample(cfg: &ExperimentConfig, args: &SampleArgs) -> Result<ODMatrix> {
    let (g, ck) = load_model(&args.model, cfg, args.tau_steps, args.mode.map(Into::into))?;
    let (manifest, features, regions) = read_city_inputs(&args.city)?;
    let n = manifest.n;
    let perm = Permutation::random(n, args.perm_intensity, args.perm_seed)?;
    let seed = generation_seed(cfg.seed, &manifest.city_id);
    let out = generate_od(&g.s2, &g.s3, &features, &regions, &perm, g.tau_steps, g.mode, seed)?;
    let aligned = odgen_core::permutation_apply(&out, &perm.inverse())?;
    atomic_write(&args.out, format_matrix_csv(aligned.values()).as_bytes())?;
    let prov = Provenance {
        format_version: 1,
        city_id: manifest.city_id.clone(),
        n,
        model_sha256: ck.meta.model_sha256.clone(),
        config_hash: ck.meta.config_hash.clone(),
        seed: cfg.seed,
        sampling_seed: seed,
        perm_seed: args.perm_seed,
        perm_intensity: args.perm_intensity,
        identity: perm.is_identity(),
        permutation: perm.as_slice().to_vec(),
        tau_steps: g.tau_steps,
        mode: g.mode,
    };
    write_json(&provenance_path(&args.out), &prov)?;
    info!("wrote {}x{n} matrix for {} to {}", n, manifest.city_id, args.out.display());
    Ok(aligned)
}

fn file_label(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

/// Resolves `--model` or `--baseline` against `--corpus`.
fn resolve_generator(cfg: &ExperimentConfig, g: &GeneratorArgs) -> Result<(Box<dyn FlowGenerator>, Corpus)> {
    let corpus_dir = g.corpus.as_ref().ok_or_else(|| Error::Config("--corpus is required with --model or --baseline".into()))?;
    let corpus = load_corpus(corpus_dir)?;
    let gen: Box<dyn FlowGenerator> = match (&g.model, g.baseline) {
        (Some(m), None) => Box::new(load_model(m, cfg, g.tau_steps, None)?.0),
        (None, Some(b)) => {
            let form = match b {
                BaselineArg::GravityPower => DecayForm::Power,
                BaselineArg::GravityExp => DecayForm::Exponential,
            };
            Box::new(gravity_fit_cities(&corpus.split_cities(SplitName::Train), form)?)
        }
        _ => return Err(Error::Config("give exactly one of --model or --baseline".into())),
    };
    Ok((gen, corpus))
}

pub fn eval(cfg: &ExperimentConfig, args: &EvalArgs) -> Result<MetricsReportFile> {
    let report = match (&args.pred, &args.truth) {
        (Some(pred), Some(truth)) => {
            let p = ODMatrix::raw(read_matrix_csv(pred)?)?;
            let t = ODMatrix::raw(read_matrix_csv(truth)?)?;
            if p.side() != t.side() {
                return Err(Error::Dimension(format!(
                    "{} is {}x{} but {} is {}x{}",
                    pred.display(),
                    p.side(),
                    p.side(),
                    truth.display(),
                    t.side(),
                    t.side()
                )));
            }
            let m = evaluate_with(&t, &p, &cfg.eval)?;
            MetricsReportFile {
                schema: METRICS_SCHEMA_ID.into(),
                format_version: REPORT_FORMAT_VERSION,
                generator: file_label(pred),
                split: None,
                seed: cfg.seed,
                bins: cfg.eval.bins,
                cities: vec![CityMetrics { city_id: file_label(truth), n: t.side(), metrics: m }],
                mean: m,
            }
        }
        _ => {
            let (g, corpus) = resolve_generator(cfg, &args.generator)?;
            let split: SplitName = args.generator.split.into();
            let cities = corpus.split_cities(split);
            let (mean, per_city) = evaluate_generator(g.as_ref(), &cities, cfg.seed, &cfg.eval)?;
            MetricsReportFile {
                schema: METRICS_SCHEMA_ID.into(),
                format_version: REPORT_FORMAT_VERSION,
                generator: g.name(),
                split: Some(split.as_str().into()),
                seed: cfg.seed,
                bins: cfg.eval.bins,
                cities: cities
                    .iter()
                    .zip(per_city)
                    .map(|(c, m)| CityMetrics { city_id: c.city_id.clone(), n: c.n(), metrics: m })
                    .collect(),
                mean,
            }
        }
    };
    let summary = metrics_summary(&report);
    write_report(&args.report, &report, &summary)?;
    print!("{summary}");
    Ok(report)
}

pub fn perm_test(cfg: &ExperimentConfig, args: &PermTestArgs) -> Result<PermTableFile> {
    let (g, corpus) = resolve_generator(cfg, &args.generator)?;
    let split: SplitName = args.generator.split.into();
    let cities = corpus.split_cities(split);
    let t = perm_robustness(g.as_ref(), &cities, &args.intensities, &args.seeds, &cfg.eval)?;
    let table = PermTableFile {
        schema: PERM_SCHEMA_ID.into(),
        format_version: REPORT_FORMAT_VERSION,
        generator: t.model,
        split: split.as_str().into(),
        seeds: t.seeds,
        bins: cfg.eval.bins,
        rows: t.rows,
        relative_increase: t.relative_increase,
        monotone: t.monotone,
    };
    let summary = perm_summary(&table);
    write_report(&args.out, &table, &summary)?;
    print!("{summary}");
    Ok(table)
}
