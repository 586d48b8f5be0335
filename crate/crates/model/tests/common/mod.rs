#![allow(dead_code)]

use candle_core::DType;
use odgen_core::{generate_corpus, CityBundle, CorpusConfig};
use odgen_model::config::{KernelConfig, PiNetConfig, Stage2Arch, VaeConfig};
use odgen_model::{ParamStore, Stage2Model, Stage3Model};

pub fn tiny_cities(n: usize, count: usize) -> Vec<CityBundle> {
    let cfg = CorpusConfig { n_cities: count, n_min: n, n_max: n, feat_dim: 4, seed: 11, ..CorpusConfig::default() };
    generate_corpus(&cfg).unwrap().cities
}

pub fn tiny_arch() -> Stage2Arch {
    Stage2Arch {
        feat_dim: 4,
        kernel: KernelConfig { n_kernels: 2, kernel_dim: 3, hidden_dim: 4 },
        vae: VaeConfig { channels: vec![4, 8], latent_channels: 2, proj_dim: 4 },
    }
}

pub fn tiny_pinet() -> PiNetConfig {
    PiNetConfig { channels: [4, 4, 4], time_dim: 8, perm_dim: 4, token_dim: 4, attn_dim: 4, n_max: 16, steps: 10 }
}

pub fn tiny_stage2(dtype: DType, seed: u64) -> (ParamStore, Stage2Model) {
    let store = ParamStore::new(dtype, seed);
    let model = Stage2Model::new(&store, &tiny_arch()).unwrap();
    (store, model)
}

/// Frozen stage-2 model plus a trainable stage-3 model on top.
pub fn tiny_stage3(dtype: DType, seed: u64) -> (Stage2Model, ParamStore, Stage3Model) {
    let s2_store = ParamStore::new(dtype, seed).frozen();
    let s2 = Stage2Model::new(&s2_store, &tiny_arch()).unwrap();
    let store = ParamStore::new(dtype, seed + 1);
    let s3 = Stage3Model::new(&store, &tiny_pinet(), 2, 1.0, 1.0).unwrap();
    (s2, store, s3)
}
