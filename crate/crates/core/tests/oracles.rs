use nalgebra::DMatrix;
use ndarray::Array2;
use odgen_core::corpus::{generate_city, CorpusConfig};
use odgen_core::gravity::{gravity_fit, DecayForm, GravityObservation};
use odgen_core::metrics::{evaluate, MetricsReport};
use odgen_core::{permutation_apply, ODMatrix, Permutation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn noiseless_city_matches_gravity_closed_form() {
    let cfg = CorpusConfig { n_cities: 5, noise_level: 0.0, seed: 21, ..CorpusConfig::default() };
    for idx in 0..cfg.n_cities {
        let city = generate_city(&cfg, idx).unwrap();
        let masses = city.masses.clone().unwrap();
        let c = city.regions.centroids();
        let (mut lhs, mut rhs) = (Vec::new(), Vec::new());
        for i in 0..city.n() {
            for j in 0..city.n() {
                if i == j {
                    continue;
                }
                let d = ((c[i][0] - c[j][0]).powi(2) + (c[i][1] - c[j][1]).powi(2)).sqrt();
                lhs.push(city.od.values()[[i, j]].ln());
                rhs.push(masses[i].ln() + masses[j].ln() - d / cfg.rho);
            }
        }
        let r = pearson(&lhs, &rhs);
        assert!((r - 1.0).abs() < 1e-9, "city {idx}: r = {r}");
    }
}

#[test]
fn feature_matrix_has_full_latent_rank() {
    let cfg = CorpusConfig { n_cities: 8, seed: 4, ..CorpusConfig::default() };
    for idx in 0..cfg.n_cities {
        let city = generate_city(&cfg, idx).unwrap();
        let x = city.features.vectors();
        let m = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]]);
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let k = cfg.latent_factor_dim.min(city.n());
        assert!(sv[k - 1] > 1e-8, "city {idx}: singular values {sv:?}");
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> ODMatrix {
    ODMatrix::raw(Array2::from_shape_fn((n, n), |_| {
        if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() * 50.0 }
    }))
    .unwrap()
}

fn assert_same(a: &MetricsReport, b: &MetricsReport) {
    assert_eq!(a, b);
}

fn all_perms(n: usize) -> Vec<Permutation> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    fn heap(k: usize, idx: &mut Vec<usize>, out: &mut Vec<Permutation>) {
        if k == 1 {
            out.push(Permutation::new(idx.clone()).unwrap());
            return;
        }
        for i in 0..k {
            heap(k - 1, idx, out);
            if k % 2 == 0 { idx.swap(i, k - 1) } else { idx.swap(0, k - 1) }
        }
    }
    heap(n, &mut idx, &mut out);
    out
}

#[test]
fn metrics_are_invariant_under_joint_reindexing() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random_matrix(&mut rng, 4);
    let mhat = random_matrix(&mut rng, 4);
    let base = evaluate(&m, &mhat).unwrap();
    let perms = all_perms(4);
    assert_eq!(perms.len(), 24);
    for p in &perms {
        let r = evaluate(&permutation_apply(&m, p).unwrap(), &permutation_apply(&mhat, p).unwrap()).unwrap();
        assert_same(&base, &r);
    }
    let m = random_matrix(&mut rng, 32);
    let mhat = random_matrix(&mut rng, 32);
    let base = evaluate(&m, &mhat).unwrap();
    for s in 0..100 {
        let p = Permutation::random(32, 1.0, s).unwrap();
        let r = evaluate(&permutation_apply(&m, &p).unwrap(), &permutation_apply(&mhat, &p).unwrap()).unwrap();
        assert_same(&base, &r);
    }
}

#[test]
fn metrics_are_symmetric_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in [2, 5, 17] {
        let a = random_matrix(&mut rng, n);
        let b = random_matrix(&mut rng, n);
        let ab = evaluate(&a, &b).unwrap();
        let ba = evaluate(&b, &a).unwrap();
        assert_eq!(ab.cpc, ba.cpc);
        assert_eq!(ab.jsd_odflow, ba.jsd_odflow);
        assert_eq!(ab.jsd_inflow, ba.jsd_inflow);
        for r in [ab, ba] {
            assert!((0.0..=1.0).contains(&r.cpc));
            for j in [r.jsd_inflow, r.jsd_outflow, r.jsd_odflow] {
                assert!((0.0..=1.0).contains(&j));
            }
            assert!(r.rmse >= 0.0 && r.nrmse.is_finite());
        }
    }
}

#[test]
fn nrmse_is_rmse_over_population_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random_matrix(&mut rng, 9);
    let b = random_matrix(&mut rng, 9);
    let r = evaluate(&a, &b).unwrap();
    // Independent two-pass computation.
    let vals: Vec<f64> = a.values().iter().copied().collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    let mse = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / vals.len() as f64;
    assert!((r.rmse - mse.sqrt()).abs() < 1e-9);
    assert!((r.nrmse - mse.sqrt() / var.sqrt()).abs() < 1e-9);
}

#[test]
fn aggregate_is_unweighted_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let reports: Vec<MetricsReport> = (0..5)
        .map(|i| {
            let n = 3 + i;
            evaluate(&random_matrix(&mut rng, n), &random_matrix(&mut rng, n)).unwrap()
        })
        .collect();
    let mean = MetricsReport::mean(&reports).unwrap();
    let cpc: f64 = reports.iter().map(|r| r.cpc).sum::<f64>() / 5.0;
    let jsd: f64 = reports.iter().map(|r| r.jsd_outflow).sum::<f64>() / 5.0;
    assert!((mean.cpc - cpc).abs() < 1e-15);
    assert!((mean.jsd_outflow - jsd).abs() < 1e-15);
}

#[test]
fn gravity_recovers_power_law_decay() {
    // Power law data built by hand from arbitrary masses and coordinates.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let gamma = 1.7;
    let scale = 0.02;
    let mut owned = Vec::new();
    for _ in 0..4 {
        let n = 12;
        let centroids: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        let regions = odgen_core::RegionSet::with_generated_ids("p", centroids).unwrap();
        let masses: Vec<f64> = (0..n).map(|_| 1.0 + 99.0 * rng.random::<f64>()).collect();
        let od = Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j { 0.0 } else { scale * masses[i] * masses[j] * regions.distance(i, j).powf(-gamma) }
        });
        owned.push((ODMatrix::raw(od).unwrap(), regions, masses));
    }
    let obs: Vec<_> = owned
        .iter()
        .map(|(od, regions, masses)| GravityObservation { od, regions, masses })
        .collect();
    let p = gravity_fit(&obs, DecayForm::Power).unwrap();
    assert!((p.decay - gamma).abs() < 1e-9);
    assert!((p.scale - scale).abs() < 1e-9);
}
