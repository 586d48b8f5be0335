mod common;

use candle_core::DType;
use common::*;
use odgen_core::seed::rng_for;
use odgen_core::Permutation;
use odgen_model::config::LossWeights;
use odgen_model::diffusion::perm_tokens;
use odgen_model::tensor::{from_f64, randn, scalar, to_f64_vec};
use odgen_model::vae::{stage2_loss, Prepared};
use odgen_model::ParamStore;

fn zero_vars(store: &ParamStore, pred: impl Fn(&str) -> bool) -> usize {
    let mut count = 0;
    for (name, v) in store.vars() {
        if pred(&name) {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
            count += 1;
        }
    }
    count
}

#[test]
fn zero_value_weights_make_the_denoiser_ignore_tokens() {
    let (s2, store, s3) = tiny_stage3(DType::F64, 1);
    assert_eq!(zero_vars(&store, |n| n.contains(".attn") && n.ends_with(".v.weight")), 5);
    for ca in s3.pinet.cross_attention() {
        assert!(to_f64_vec(ca.value_weight()).unwrap().iter().all(|v| *v == 0.0));
    }
    let city = &tiny_cities(6, 1)[0];
    let c = s3.condition(&s2, city, &Permutation::identity(6)).unwrap();
    let z = randn(c.z0.dims(), &mut rng_for(3, &[]), DType::F64).unwrap();
    let run = |p: &Permutation| to_f64_vec(&s3.predict(&z, &c.zc, &perm_tokens(p, &s3.perm).unwrap(), 4, 6, 2).unwrap()).unwrap();
    let a = run(&Permutation::identity(6));
    let b = run(&Permutation::random(6, 1.0, 8).unwrap());
    assert_eq!(a, b);
    let junk = randn(&[6, 4], &mut rng_for(4, &[]), DType::F64).unwrap();
    assert_eq!(a, to_f64_vec(&s3.predict(&z, &c.zc, &junk, 4, 6, 2).unwrap()).unwrap());
}

#[test]
fn tokens_matter_with_live_value_weights() {
    let (s2, _store, s3) = tiny_stage3(DType::F64, 1);
    let city = &tiny_cities(6, 1)[0];
    let c = s3.condition(&s2, city, &Permutation::identity(6)).unwrap();
    let z = randn(c.z0.dims(), &mut rng_for(3, &[]), DType::F64).unwrap();
    let run = |p: &Permutation| to_f64_vec(&s3.predict(&z, &c.zc, &perm_tokens(p, &s3.perm).unwrap(), 4, 6, 2).unwrap()).unwrap();
    assert_ne!(run(&Permutation::identity(6)), run(&Permutation::random(6, 1.0, 8).unwrap()));
}

#[test]
fn only_used_embedding_rows_receive_gradient() {
    let (s2, store, s3) = tiny_stage3(DType::F64, 2);
    let city = &tiny_cities(6, 1)[0];
    let c = s3.condition(&s2, city, &Permutation::random(6, 1.0, 5).unwrap()).unwrap();
    let grads = s3.variant_terms(&s2, &c, 3, None).unwrap().0.backward().unwrap();
    let table = store.vars().into_iter().find(|(n, _)| n == "perm.table").unwrap().1;
    let g = grads.get(table.as_tensor()).unwrap();
    let (rows, d) = g.dims2().unwrap();
    let g = to_f64_vec(g).unwrap();
    for r in 0..rows {
        let norm: f64 = g[r * d..(r + 1) * d].iter().map(|v| v * v).sum();
        if r < 6 {
            assert!(norm > 0.0, "row {r} unused");
        } else {
            assert_eq!(norm, 0.0, "row {r} got gradient");
        }
    }
}

#[test]
fn zero_contrastive_weight_silences_the_kernel_branch() {
    let (store, model) = tiny_stage2(DType::F64, 3);
    let batch: Vec<Prepared> = tiny_cities(6, 3).iter().map(|c| Prepared::new(c, 2, DType::F64).unwrap()).collect();
    let w = LossWeights { alpha: 0.0, ..LossWeights::default() };
    let grads = stage2_loss(&model, &batch, &[1, 2, 3], &w).unwrap().total.backward().unwrap();
    let mut silent = 0;
    for (name, v) in store.vars() {
        if name.starts_with("mk_") || name.starts_with("kernels") || name.starts_with("flow_head") {
            if let Some(g) = grads.get(v.as_tensor()) {
                assert!(to_f64_vec(g).unwrap().iter().all(|x| *x == 0.0), "{name}");
            }
            silent += 1;
        }
    }
    assert!(silent > 10);
    let w = LossWeights { alpha: 0.1, ..LossWeights::default() };
    let grads = stage2_loss(&model, &batch, &[1, 2, 3], &w).unwrap().total.backward().unwrap();
    let head = store.vars().into_iter().find(|(n, _)| n == "mk_head.weight").unwrap().1;
    assert!(to_f64_vec(grads.get(head.as_tensor()).unwrap()).unwrap().iter().any(|x| *x != 0.0));
}

#[test]
fn zero_denoiser_noise_error_is_about_one() {
    let (s2, store, s3) = tiny_stage3(DType::F64, 4);
    assert_eq!(zero_vars(&store, |n| n.starts_with("pinet.out.")), 2);
    let cities = tiny_cities(12, 8);
    let conds: Vec<_> = cities.iter().map(|c| s3.condition(&s2, c, &Permutation::identity(12)).unwrap()).collect();
    let mut total = 0.0;
    let rounds = 50;
    for r in 0..rounds {
        total += scalar(&s3.loss_ldm(&s2, &conds, r).unwrap()).unwrap();
    }
    let mean = total / rounds as f64;
    // 8 cities x 50 rounds x 72 cells of squared unit normals.
    assert!((mean - 1.0).abs() < 0.03, "{mean}");
}

#[test]
fn padded_cells_never_reach_the_losses() {
    let (_store, model) = tiny_stage2(DType::F64, 5);
    let cities = tiny_cities(5, 3);
    let f = 2;
    let mut batch: Vec<Prepared> = cities.iter().map(|c| Prepared::new(c, f, DType::F64).unwrap()).collect();
    let w = LossWeights::default();
    let terms = |b: &[Prepared]| {
        let t = stage2_loss(&model, b, &[7, 8, 9], &w).unwrap();
        [t.total, t.rec, t.con, t.kl].map(|x| scalar(&x).unwrap().to_bits())
    };
    let before = terms(&batch);
    for (i, p) in batch.iter_mut().enumerate() {
        let side = p.flow.dims()[3];
        assert_eq!(side, 6);
        let noise = randn(&[1, 1, side, side], &mut rng_for(i as u64, &[]), DType::F64).unwrap().affine(100.0, 0.0).unwrap();
        let mask: Vec<f64> = (0..side * side).map(|k| if k / side < 5 && k % side < 5 { 0.0 } else { 1.0 }).collect();
        let mask = from_f64(mask, &[1, 1, side, side], DType::F64).unwrap();
        p.flow = p.flow.add(&noise.mul(&mask).unwrap()).unwrap();
    }
    assert_eq!(before, terms(&batch));
}
