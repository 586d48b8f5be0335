//! Reproducible synthetic cities: gravity-law flows driven by latent
//! per-region factors, with features that are a noisy linear view of the
//! same factors.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::od::{FeatureMatrix, ODMatrix, Permutation, RegionSet};
use crate::seed;

const GLOBAL_STREAM: u64 = 0x6c6f_6261_6c00;
const CITY_STREAM: u64 = 0x6369_7479_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_cities: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub feat_dim: usize,
    pub latent_factor_dim: usize,
    /// Standard deviation of the multiplicative log-normal flow noise.
    pub noise_level: f64,
    /// Distance decay length of the ground-truth gravity law.
    pub rho: f64,
    /// Standard deviation of the additive Gaussian feature noise.
    pub feature_noise: f64,
    /// Mean flow per matrix cell before noise.
    pub target_mean: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_cities: 200,
            n_min: 8,
            n_max: 32,
            feat_dim: 32,
            latent_factor_dim: 8,
            noise_level: 0.3,
            rho: 0.3,
            feature_noise: 0.05,
            target_mean: 10.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_cities == 0 {
            return bad("n_cities must be at least 1".into());
        }
        if self.n_min < 2 || self.n_min > self.n_max {
            return bad(format!(
                "region range must satisfy 2 <= n_min <= n_max, got [{}, {}]",
                self.n_min, self.n_max
            ));
        }
        if self.feat_dim == 0 || self.latent_factor_dim == 0 {
            return bad("feature and latent factor dimensions must be positive".into());
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise_level must be >= 0, got {}", self.noise_level));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad(format!("feature_noise must be >= 0, got {}", self.feature_noise));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be > 0, got {}", self.rho));
        }
        if !(self.target_mean > 0.0 && self.target_mean.is_finite()) {
            return bad(format!("target_mean must be > 0, got {}", self.target_mean));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityBundle {
    pub city_id: String,
    pub regions: RegionSet,
    pub features: FeatureMatrix,
    pub od: ODMatrix,
    /// Generator-side masses `p` with `od = p_i p_j exp(-d / rho)` before noise.
    /// Only known for synthetic cities created in this process.
    pub masses: Option<Vec<f64>>,
}

impl CityBundle {
    pub fn new(
        city_id: String,
        regions: RegionSet,
        features: FeatureMatrix,
        od: ODMatrix,
    ) -> Result<Self> {
        let n = regions.len();
        if features.rows() != n || od.side() != n {
            return Err(Error::Dimension(format!(
                "city {city_id}: {n} regions, {} feature rows, {}x{} OD",
                features.rows(),
                od.side(),
                od.side()
            )));
        }
        if od.scale() != crate::od::Scale::Raw {
            return Err(Error::State(format!("city {city_id}: OD must be raw scale")));
        }
        Ok(Self {
            city_id,
            regions,
            features,
            od,
            masses: None,
        })
    }

    pub fn n(&self) -> usize {
        self.regions.len()
    }

    /// Reindexes regions, features and flows by `p`.
    pub fn permuted(&self, p: &Permutation) -> Result<Self> {
        Ok(Self {
            city_id: self.city_id.clone(),
            regions: self.regions.permuted(p)?,
            features: self.features.permuted(p)?,
            od: crate::od::permutation_apply(&self.od, p)?,
            masses: self
                .masses
                .as_ref()
                .map(|m| p.as_slice().iter().map(|&k| m[k]).collect()),
        })
    }
}

struct GlobalMaps {
    w: Array1<f64>,
    a: Array2<f64>,
    b: Array1<f64>,
}

fn global_maps(cfg: &CorpusConfig) -> GlobalMaps {
    let mut rng = seed::rng_for(cfg.seed, &[GLOBAL_STREAM]);
    let k = cfg.latent_factor_dim;
    let d = cfg.feat_dim;
    let kscale = 1.0 / (k as f64).sqrt();
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let w = Array1::from_shape_fn(k, |_| normal() * kscale);
    let a = Array2::from_shape_fn((d, k), |_| normal() * kscale);
    let b = Array1::from_shape_fn(d, |_| normal());
    GlobalMaps { w, a, b }
}

/// Position of `(x, y)` along a Hilbert curve over a `2^order` grid of the
/// unit square.
fn hilbert_index(x: f64, y: f64, order: u32) -> u64 {
    let side = 1u64 << order;
    let clamp = |v: f64| ((v * side as f64) as u64).min(side - 1);
    let (mut x, mut y) = (clamp(x), clamp(y));
    let mut d = 0u64;
    let mut s = side / 2;
    while s > 0 {
        let rx = u64::from(x & s > 0);
        let ry = u64::from(y & s > 0);
        d += s * s * ((3 * rx) ^ ry);
        if ry == 0 {
            if rx == 1 {
                x = side - 1 - x;
                y = side - 1 - y;
            }
            std::mem::swap(&mut x, &mut y);
        }
        s /= 2;
    }
    d
}

pub fn city_id(index: usize) -> String {
    format!("city-{index:04}")
}

/// Builds city `index` of the corpus described by `cfg`. Regions are numbered
/// along a Hilbert curve so neighbouring indices tend to be neighbouring
/// places, as with census tract numbering.
pub fn generate_city(cfg: &CorpusConfig, index: usize) -> Result<CityBundle> {
    cfg.validate()?;
    if index >= cfg.n_cities {
        return Err(Error::Config(format!(
            "city index {index} out of range for {} cities",
            cfg.n_cities
        )));
    }
    let maps = global_maps(cfg);
    let mut rng = seed::rng_for(cfg.seed, &[CITY_STREAM, index as u64]);
    let n = rng.random_range(cfg.n_min..=cfg.n_max);
    let k = cfg.latent_factor_dim;

    let mut centroids: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    centroids.sort_by_key(|c| hilbert_index(c[0], c[1], 16));

    let factors = Array2::from_shape_fn((n, k), |_| rng.sample::<f64, _>(StandardNormal));
    let log_mass = factors.dot(&maps.w);

    let id = city_id(index);
    let regions = RegionSet::with_generated_ids(&id, centroids)?;

    let mut od = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            (log_mass[i] + log_mass[j] - regions.distance(i, j) / cfg.rho).exp()
        }
    });
    let scale = cfg.target_mean / od.mean().unwrap_or(1.0);
    od.mapv_inplace(|v| v * scale);
    for ((i, j), v) in od.indexed_iter_mut() {
        let xi: f64 = rng.sample(StandardNormal);
        if i != j {
            *v = (*v * (cfg.noise_level * xi).exp()).max(0.0);
        }
    }

    let mut features = factors.dot(&maps.a.t());
    for mut row in features.rows_mut() {
        row += &maps.b;
        for v in row.iter_mut() {
            *v += cfg.feature_noise * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let root = scale.sqrt();
    let masses = log_mass.iter().map(|&l| root * l.exp()).collect();
    let mut city = CityBundle::new(id, regions, FeatureMatrix::new(features)?, ODMatrix::raw(od)?)?;
    city.masses = Some(masses);
    Ok(city)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl Split {
    /// Deterministic 8:1:1 partition ordered by a SHA-256 hash of each id.
    pub fn from_ids<S: AsRef<str>>(ids: &[S]) -> Self {
        let mut keyed: Vec<([u8; 8], &str)> = ids
            .iter()
            .map(|id| {
                let digest = Sha256::digest(id.as_ref().as_bytes());
                let mut key = [0u8; 8];
                key.copy_from_slice(&digest[..8]);
                (key, id.as_ref())
            })
            .collect();
        keyed.sort();
        let n = keyed.len();
        let tenth = ((n as f64) / 10.0).round() as usize;
        let (n_val, n_test) = if n >= 3 { (tenth.max(1), tenth.max(1)) } else { (0, 0) };
        let n_train = n - n_val - n_test;
        let take = |r: std::ops::Range<usize>| keyed[r].iter().map(|(_, id)| id.to_string()).collect();
        Self {
            train: take(0..n_train),
            val: take(n_train..n_train + n_val),
            test: take(n_train + n_val..n),
        }
    }

    pub fn of(&self, id: &str) -> Option<SplitName> {
        if self.train.iter().any(|x| x == id) {
            Some(SplitName::Train)
        } else if self.val.iter().any(|x| x == id) {
            Some(SplitName::Val)
        } else if self.test.iter().any(|x| x == id) {
            Some(SplitName::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub cities: Vec<CityBundle>,
    pub split: Split,
}

impl Corpus {
    pub fn from_cities(cities: Vec<CityBundle>) -> Self {
        let ids: Vec<&str> = cities.iter().map(|c| c.city_id.as_str()).collect();
        let split = Split::from_ids(&ids);
        Self { cities, split }
    }

    pub fn city(&self, id: &str) -> Option<&CityBundle> {
        self.cities.iter().find(|c| c.city_id == id)
    }

    /// Cities of one split, in split order.
    pub fn split_cities(&self, which: SplitName) -> Vec<&CityBundle> {
        self.split
            .ids(which)
            .iter()
            .filter_map(|id| self.city(id))
            .collect()
    }

    pub fn max_regions(&self) -> usize {
        self.cities.iter().map(CityBundle::n).max().unwrap_or(0)
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let cities = (0..cfg.n_cities)
        .map(|i| generate_city(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::from_cities(cities))
}
