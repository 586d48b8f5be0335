mod common;

use candle_core::{DType, Var};
use common::*;
use odgen_core::Permutation;
use odgen_model::gradcheck::{check_store, check_vars};
use odgen_model::multikernel::kernel_matrix;
use odgen_model::tensor::from_f64;
use odgen_model::vae::{loss_contrastive, loss_kl, loss_rec, stage2_loss, Prepared};
use odgen_model::config::LossWeights;

const H: f64 = 1e-6;
const TOL: f64 = 1e-3;

fn prepared(n: usize, count: usize) -> Vec<Prepared> {
    tiny_cities(n, count).iter().map(|c| Prepared::new(c, 2, DType::F64).unwrap()).collect()
}

#[test]
fn reconstruction_term_gradients() {
    let (store, model) = tiny_stage2(DType::F64, 1);
    let p = &prepared(6, 1)[0];
    let loss = || {
        let out = model.forward(p, Some(5))?;
        loss_rec(&out.rec, &p.target)
    };
    let rep = check_store(&store, loss, 4, H).unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
    for live in ["dec.out.weight", "flow_enc.stem.weight", "flow_enc.out.weight"] {
        assert!(!rep.negligible.iter().any(|n| n == live), "{live} has no gradient: {rep:?}");
    }
}

#[test]
fn kl_term_gradients() {
    let (store, model) = tiny_stage2(DType::F64, 2);
    let p = &prepared(6, 1)[0];
    let loss = || {
        let out = model.forward(p, Some(5))?;
        loss_kl(&out.mu, &out.logvar)
    };
    let rep = check_store(&store, loss, 4, H).unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

#[test]
fn contrastive_term_gradients() {
    let (store, model) = tiny_stage2(DType::F64, 3);
    let batch = prepared(6, 3);
    let w = LossWeights { alpha: 1.0, beta: 0.0, tau_temp: 0.5 };
    let loss = || {
        let t = stage2_loss(&model, &batch, &[1, 2, 3], &w)?;
        Ok(t.con)
    };
    let rep = check_store(&store, loss, 3, H).unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
    assert!(rep.negligible.iter().all(|n| !n.starts_with("kernels")), "{rep:?}");
}

#[test]
fn contrastive_loss_input_gradients() {
    let zs = Var::from_tensor(&from_f64((0..12).map(|i| (i as f64 * 0.37).sin()).collect(), &[4, 3], DType::F64).unwrap()).unwrap();
    let zc = Var::from_tensor(&from_f64((0..12).map(|i| (i as f64 * 0.91).cos()).collect(), &[4, 3], DType::F64).unwrap()).unwrap();
    let vars = vec![("zs".to_string(), zs.clone()), ("zc".to_string(), zc.clone())];
    let rep = check_vars(&vars, || loss_contrastive(zs.as_tensor(), zc.as_tensor(), 0.2), 12, H).unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
    assert!(rep.negligible.is_empty());
}

#[test]
fn kl_input_gradients() {
    let mu = Var::from_tensor(&from_f64(vec![0.3, -1.0, 2.0, 0.0], &[1, 1, 2, 2], DType::F64).unwrap()).unwrap();
    let lv = Var::from_tensor(&from_f64(vec![-0.5, 0.2, 1.0, -2.0], &[1, 1, 2, 2], DType::F64).unwrap()).unwrap();
    let vars = vec![("mu".to_string(), mu.clone()), ("logvar".to_string(), lv.clone())];
    let rep = check_vars(&vars, || loss_kl(mu.as_tensor(), lv.as_tensor()), 4, H).unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

#[test]
fn kernel_matrix_gradients() {
    let (store, model) = tiny_stage2(DType::F64, 4);
    let p = &prepared(6, 1)[0];
    let rep = check_store(&store, || Ok(kernel_matrix(&p.features, &model.kernels.map(1))?.sqr()?.sum_all()?), 4, H).unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
    let rep = check_store(&store, || Ok(model.mk_tensor(&p.features, &p.structural)?.tensor().sqr()?.sum_all()?), 4, H).unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

#[test]
fn noise_prediction_gradients() {
    let (s2, store, s3) = tiny_stage3(DType::F64, 5);
    let city = &tiny_cities(6, 1)[0];
    let c = s3.condition(&s2, city, &Permutation::random(6, 0.5, 3).unwrap()).unwrap();
    let rep = check_store(&store, || Ok(s3.variant_terms(&s2, &c, 9, None)?.0), 3, H).unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
    assert!(rep.negligible.iter().all(|n| !n.starts_with("pinet.out")), "{rep:?}");
}

#[test]
fn reindexing_term_gradients() {
    let (s2, store, s3) = tiny_stage3(DType::F64, 6);
    let cities = tiny_cities(6, 2);
    let refs: Vec<_> = cities.iter().collect();
    let rep = check_store(&store, || s3.loss_pre(&s2, &refs, 2, 0.1, 0.5, 5.0, 4), 3, H).unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
    assert!(rep.negligible.iter().all(|n| !n.starts_with("perm.")), "{rep:?}");
}
