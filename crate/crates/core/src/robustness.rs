//! Progressive index-permutation protocol: reindex a city at a given
//! intensity, generate, map the output back and score it.

use serde::{Deserialize, Serialize};

use crate::corpus::CityBundle;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_with, EvalOptions, MetricsReport};
use crate::od::{permutation_apply, ODMatrix, Permutation};
use crate::seed::{derive_seed, hash_str};

const PERM_STREAM: u64 = 0x7065_726d;
const GEN_STREAM: u64 = 0x6765_6e00;

/// Anything that produces a raw-scale OD matrix for a city presented under a
/// permutation. The output is indexed like `city.permuted(perm)`.
pub trait FlowGenerator {
    fn generate(&self, city: &CityBundle, perm: &Permutation, seed: u64) -> Result<ODMatrix>;

    fn name(&self) -> String;
}

/// Seed used to draw the permutation for one (run seed, city).
pub fn permutation_seed(run_seed: u64, city_id: &str) -> u64 {
    derive_seed(run_seed, &[PERM_STREAM, hash_str(city_id)])
}

/// Sampling seed for one (run seed, city); shared by every intensity so rows
/// differ only through the permutation.
pub fn generation_seed(run_seed: u64, city_id: &str) -> u64 {
    derive_seed(run_seed, &[GEN_STREAM, hash_str(city_id)])
}

/// Generates `city` under `perm` and returns the prediction in the
/// original region order.
pub fn generate_aligned<G: FlowGenerator + ?Sized>(
    generator: &G,
    city: &CityBundle,
    perm: &Permutation,
    seed: u64,
) -> Result<ODMatrix> {
    let out = generator.generate(city, perm, seed)?;
    permutation_apply(&out, &perm.inverse())
}

/// Mean metrics over `cities` for the unpermuted inputs.
pub fn evaluate_generator<G: FlowGenerator + ?Sized>(
    generator: &G,
    cities: &[&CityBundle],
    run_seed: u64,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<MetricsReport>)> {
    let per_city = cities
        .iter()
        .map(|c| {
            let pred = generator.generate(
                c,
                &Permutation::identity(c.n()),
                generation_seed(run_seed, &c.city_id),
            )?;
            evaluate_with(&c.od, &pred, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = MetricsReport::mean(&per_city)
        .ok_or_else(|| Error::Input("no cities to evaluate".into()))?;
    Ok((mean, per_city))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub intensity: f64,
    pub mean_jsd_odflow: f64,
    /// Mean over cities, one entry per run seed.
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub model: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<RobustnessRow>,
    /// `(last - first) / first` over the requested intensities.
    pub relative_increase: f64,
    /// Whether the row means never decrease with intensity.
    pub monotone: bool,
}

pub fn perm_robustness<G: FlowGenerator + ?Sized>(
    generator: &G,
    cities: &[&CityBundle],
    intensities: &[f64],
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<RobustnessTable> {
    if cities.is_empty() || seeds.is_empty() || intensities.is_empty() {
        return Err(Error::Config(
            "robustness needs at least one city, seed and intensity".into(),
        ));
    }
    let mut rows = Vec::with_capacity(intensities.len());
    for &intensity in intensities {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let mut total = 0.0;
            for c in cities {
                let perm = Permutation::random(c.n(), intensity, permutation_seed(s, &c.city_id))?;
                let pred = generate_aligned(generator, c, &perm, generation_seed(s, &c.city_id))?;
                total += evaluate_with(&c.od, &pred, opts)?.jsd_odflow;
            }
            per_seed.push(total / cities.len() as f64);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(RobustnessRow {
            intensity,
            mean_jsd_odflow: mean,
            per_seed,
        });
    }
    let first = rows[0].mean_jsd_odflow;
    let last = rows[rows.len() - 1].mean_jsd_odflow;
    let relative_increase = if first > 0.0 { (last - first) / first } else { last - first };
    let monotone = rows
        .windows(2)
        .all(|w| w[1].mean_jsd_odflow >= w[0].mean_jsd_odflow);
    Ok(RobustnessTable {
        model: generator.name(),
        seeds: seeds.to_vec(),
        rows,
        relative_increase,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig, SplitName};
    use crate::gravity::{gravity_fit_cities, DecayForm};

    /// Deterministic stand-in that is badly non-equivariant: it always
    /// returns the ground truth in the *original* order.
    struct Oblivious;

    impl FlowGenerator for Oblivious {
        fn generate(&self, city: &CityBundle, _perm: &Permutation, _seed: u64) -> Result<ODMatrix> {
            Ok(city.od.clone())
        }

        fn name(&self) -> String {
            "oblivious".into()
        }
    }

    fn corpus() -> crate::corpus::Corpus {
        generate_corpus(&CorpusConfig { n_cities: 20, seed: 3, ..CorpusConfig::default() }).unwrap()
    }

    #[test]
    fn gravity_rows_are_flat() {
        let corpus = corpus();
        let train = corpus.split_cities(SplitName::Train);
        let test = corpus.split_cities(SplitName::Test);
        let gm = gravity_fit_cities(&train, DecayForm::Exponential).unwrap();
        let table = perm_robustness(&gm, &test, &[0.1, 0.3, 0.5, 0.8, 1.0], &[1, 2, 3], &EvalOptions::default()).unwrap();
        assert_eq!(table.rows.len(), 5);
        let first = table.rows[0].mean_jsd_odflow;
        for r in &table.rows {
            assert!((r.mean_jsd_odflow - first).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_intensity_equals_plain_evaluation() {
        let corpus = corpus();
        let test = corpus.split_cities(SplitName::Train);
        let gm = gravity_fit_cities(&test, DecayForm::Power).unwrap();
        let opts = EvalOptions::default();
        let table = perm_robustness(&gm, &test, &[0.0], &[5], &opts).unwrap();
        let (plain, _) = evaluate_generator(&gm, &test, 5, &opts).unwrap();
        assert_eq!(table.rows[0].mean_jsd_odflow, plain.jsd_odflow);
    }

    #[test]
    fn identity_output_has_zero_jsd_at_every_intensity() {
        // The histogram JSD only sees the value multiset, which reindexing keeps.
        let corpus = corpus();
        let cities = corpus.split_cities(SplitName::Train);
        let table = perm_robustness(&Oblivious, &cities, &[0.0, 1.0], &[9], &EvalOptions::default()).unwrap();
        assert!(table.rows.iter().all(|r| r.mean_jsd_odflow == 0.0));
        assert!(table.monotone);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(perm_robustness(&Oblivious, &[], &[0.5], &[1], &EvalOptions::default()).is_err());
    }
}
