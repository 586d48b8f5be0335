
use candle_core::DType;
use nalgebra::DMatrix;
use odgen_core::{generate_corpus, CityBundle, CorpusConfig, Permutation};
use odgen_model::config::KernelConfig;
use odgen_model::multikernel::{kernel_matrix, mk_tensor, KernelMaps};
use odgen_model::tensor::{from_array2, to_array2};
use odgen_model::ParamStore;

/// All orderings of 0..n in lexicographic order.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else { return out };
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
    }
}

fn city(n: usize, seed: u64) -> CityBundle {
    let cfg = CorpusConfig { n_cities: 1, n_min: n, n_max: n, seed, ..CorpusConfig::default() };
    generate_corpus(&cfg).unwrap().cities.remove(0)
}

fn maps(dtype: DType, seed: u64) -> (ParamStore, KernelMaps) {
    let store = ParamStore::new(dtype, seed);
    let m = KernelMaps::new(&store.root(), 32, &KernelConfig::default()).unwrap();
    (store, m)
}

#[test]
fn gram_channels_are_symmetric_and_psd() {
    for inst in 0..100u64 {
        let c = city(8 + (inst as usize % 25), inst);
        let (_s, m) = maps(DType::F64, inst);
        let k = mk_tensor(&c.features, &c.regions, &m, DType::F64).unwrap();
        for ch in 0..k.channels() {
            let a = k.channel(ch).unwrap();
            let n = a.nrows();
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(a[[i, j]].to_bits(), a[[j, i]].to_bits(), "instance {inst} channel {ch}");
                }
            }
            let eig = DMatrix::from_fn(n, n, |i, j| a[[i, j]]).symmetric_eigen().eigenvalues;
            let max = eig.iter().cloned().fold(f64::MIN, f64::max);
            let min = eig.iter().cloned().fold(f64::MAX, f64::min);
            assert!(min >= -1e-6 * max, "instance {inst} channel {ch}: min {min} max {max}");
        }
    }
}

#[test]
fn single_map_gram_is_psd() {
    let c = city(12, 3);
    let (_s, m) = maps(DType::F64, 9);
    let x = from_array2(c.features.vectors(), DType::F64).unwrap();
    let k = to_array2(&kernel_matrix(&x, &m.map(2)).unwrap()).unwrap();
    let eig = DMatrix::from_fn(12, 12, |i, j| k[[i, j]]).symmetric_eigen().eigenvalues;
    let max = eig.max();
    assert!(eig.min() >= -1e-6 * max);
}

fn assert_equivariant(c: &CityBundle, m: &KernelMaps, p: &Permutation, dtype: DType) {
    let base = mk_tensor(&c.features, &c.regions, m, dtype).unwrap();
    let pc = c.permuted(p).unwrap();
    let moved = mk_tensor(&pc.features, &pc.regions, m, dtype).unwrap();
    for ch in 0..base.channels() {
        let want = p.apply_array(&base.channel(ch).unwrap()).unwrap();
        let got = moved.channel(ch).unwrap();
        assert!(want.iter().zip(got.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "channel {ch} of {:?}", p.as_slice());
    }
}

#[test]
fn every_reindexing_of_four_regions_permutes_channels_exactly() {
    let c = city(4, 1);
    for dtype in [DType::F64, DType::F32] {
        let (_s, m) = maps(dtype, 2);
        let all = permutations(4);
        assert_eq!(all.len(), 24);
        for p in all {
            assert_equivariant(&c, &m, &Permutation::new(p).unwrap(), dtype);
        }
    }
}

#[test]
fn random_reindexings_permute_channels_exactly() {
    for n in [16, 32] {
        let c = city(n, n as u64);
        for dtype in [DType::F64, DType::F32] {
            let (_s, m) = maps(dtype, 5);
            for s in 0..10 {
                assert_equivariant(&c, &m, &Permutation::random(n, 1.0, s).unwrap(), dtype);
            }
        }
    }
}

#[test]
fn non_finite_features_are_rejected() {
    let (_s, m) = maps(DType::F64, 0);
    let x = odgen_model::tensor::from_f64(vec![f64::NAN; 64], &[2, 32], DType::F64).unwrap();
    assert_eq!(kernel_matrix(&x, &m.map(0)).unwrap_err().category(), "input");
}
