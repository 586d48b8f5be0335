//! Learned Gram channels over region features plus a distance prior.
//!
//! Every reduction here is an explicit broadcast-multiply-sum rather than a
//! matrix product, so each entry is accumulated in the same order no matter
//! where its rows sit. Reindexing the regions therefore reindexes every
//! channel bit for bit.

use candle_core::{DType, Tensor};
use ndarray::Array2;
use odgen_core::metrics::order_free_sum;
use odgen_core::{FeatureMatrix, RegionSet};

use crate::config::KernelConfig;
use crate::error::{Error, Result};
use crate::params::{Init, Scope};
use crate::tensor::{from_array2, from_f64, to_f64_vec};

/// A map from region features (n, d) to feature-space coordinates (n, k).
pub trait FeatureMap {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
}

pub struct IdentityMap;

impl FeatureMap for IdentityMap {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// `L` two-layer perceptrons `d -> h -> k` with a tanh between layers,
/// evaluated together.
#[derive(Debug, Clone)]
pub struct KernelMaps {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// (.., n, a) x (.., a, b) -> (.., n, b) without a GEMM.
fn row_product(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    Ok(x.unsqueeze(r)?.broadcast_mul(&w.unsqueeze(r - 2)?)?.sum(r - 1)?)
}

/// (.., n, k) -> (.., n, n) with entry (i, j) = <phi_i, phi_j>.
pub fn gram(phi: &Tensor) -> Result<Tensor> {
    let r = phi.rank();
    Ok(phi.unsqueeze(r - 1)?.broadcast_mul(&phi.unsqueeze(r - 2)?)?.sum(r)?)
}

impl KernelMaps {
    pub fn new(s: &Scope, feat_dim: usize, cfg: &KernelConfig) -> Result<Self> {
        let (l, h, k) = (cfg.n_kernels, cfg.hidden_dim, cfg.kernel_dim);
        Ok(Self {
            w1: s.get("w1", &[l, feat_dim, h], Init::Uniform(1.0 / (feat_dim as f64).sqrt()))?,
            b1: s.get("b1", &[l, 1, h], Init::Uniform(0.5))?,
            w2: s.get("w2", &[l, h, k], Init::Uniform(1.0 / (h as f64).sqrt()))?,
            b2: s.get("b2", &[l, 1, k], Init::Zeros)?,
        })
    }

    pub fn n_kernels(&self) -> usize {
        self.w1.dims()[0]
    }

    pub fn feat_dim(&self) -> usize {
        self.w1.dims()[1]
    }

    /// Feature-space coordinates for all maps: (L, n, k).
    pub fn phi(&self, x: &Tensor) -> Result<Tensor> {
        let h = row_product(&x.unsqueeze(0)?, &self.w1)?.broadcast_add(&self.b1)?.tanh()?;
        Ok(row_product(&h, &self.w2)?.broadcast_add(&self.b2)?)
    }

    pub fn map(&self, l: usize) -> SingleMap<'_> {
        SingleMap { maps: self, l }
    }

    /// Learned channels (L, n, n), each divided by its mean absolute value.
    /// The divisor's value is summed in a fixed order; its gradient is that
    /// of the plain mean.
    pub fn channels(&self, x: &Tensor) -> Result<Tensor> {
        check_features(x, self.feat_dim())?;
        let k = gram(&self.phi(x)?)?;
        let (l, n, _) = k.dims3()?;
        let vals = to_f64_vec(&k)?;
        let means: Vec<f64> = vals.chunks(n * n).map(|c| order_free_sum(c.iter().map(|v| v.abs())) / (n * n) as f64).collect();
        let mut out = Vec::with_capacity(l);
        for (i, m) in means.into_iter().enumerate() {
            let ki = k.get(i)?;
            if m > 0.0 && m.is_finite() {
                let graph = ki.abs()?.mean_all()?;
                let norm = from_f64(vec![m], &[], k.dtype())?.add(&graph.sub(&graph.detach())?)?;
                out.push(ki.broadcast_div(&norm)?);
            } else {
                out.push(ki);
            }
        }
        Ok(Tensor::stack(&out, 0)?)
    }
}

pub struct SingleMap<'a> {
    maps: &'a KernelMaps,
    l: usize,
}

impl FeatureMap for SingleMap<'_> {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let m = self.maps;
        let h = row_product(x, &m.w1.get(self.l)?)?.broadcast_add(&m.b1.get(self.l)?)?.tanh()?;
        Ok(row_product(&h, &m.w2.get(self.l)?)?.broadcast_add(&m.b2.get(self.l)?)?)
    }
}

fn check_features(x: &Tensor, d: usize) -> Result<()> {
    let (_, cols) = x.dims2()?;
    if cols != d {
        return Err(Error::Dimension(format!("features have {cols} columns, kernel maps expect {d}")));
    }
    if to_f64_vec(x)?.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("features contain non-finite values".into()));
    }
    Ok(())
}

/// Gram matrix `K[i, j] = <phi(x_i), phi(x_j)>` for one feature map.
pub fn kernel_matrix(features: &Tensor, phi: &dyn FeatureMap) -> Result<Tensor> {
    if to_f64_vec(features)?.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("features contain non-finite values".into()));
    }
    gram(&phi.apply(features)?)
}

/// Gaussian affinity of centroid distances; diagonal exactly 1.
pub fn structural_kernel(regions: &RegionSet, sigma: f64) -> Result<Array2<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("structural kernel bandwidth {sigma} must be positive")));
    }
    let c = regions.centroids();
    let n = regions.len();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        let (dx, dy) = (c[i][0] - c[j][0], c[i][1] - c[j][1]);
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    }))
}

/// Median distance over unordered region pairs, falling back to the largest
/// distance and then 1 when that is zero.
pub fn median_distance(regions: &RegionSet) -> f64 {
    let n = regions.len();
    let mut d: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| regions.distance(i, j)).collect();
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 {
        med
    } else if d[m - 1] > 0.0 {
        d[m - 1]
    } else {
        1.0
    }
}

/// Stacked kernel channels (L + 1, n, n); the last channel is the
/// structural prior.
#[derive(Debug, Clone)]
pub struct MkTensor {
    t: Tensor,
}

impl MkTensor {
    pub fn tensor(&self) -> &Tensor {
        &self.t
    }

    pub fn channels(&self) -> usize {
        self.t.dims()[0]
    }

    pub fn n(&self) -> usize {
        self.t.dims()[1]
    }

    pub fn channel(&self, c: usize) -> Result<Array2<f64>> {
        crate::tensor::to_array2(&self.t.get(c)?)
    }
}

pub fn mk_tensor_from(features: &Tensor, structural: &Tensor, maps: &KernelMaps) -> Result<MkTensor> {
    let n = features.dims2()?.0;
    if structural.dims() != [n, n] {
        return Err(Error::Dimension(format!("structural prior {:?} for {n} regions", structural.dims())));
    }
    let learned = maps.channels(features)?;
    Ok(MkTensor { t: Tensor::cat(&[learned, structural.unsqueeze(0)?], 0)? })
}

pub fn mk_tensor(features: &FeatureMatrix, regions: &RegionSet, maps: &KernelMaps, dtype: DType) -> Result<MkTensor> {
    if features.rows() != regions.len() {
        return Err(Error::Dimension(format!("{} feature rows for {} regions", features.rows(), regions.len())));
    }
    let x = from_array2(features.vectors(), dtype)?;
    let s = from_array2(&structural_kernel(regions, median_distance(regions))?, dtype)?;
    mk_tensor_from(&x, &s, maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::to_array2;

    #[test]
    fn identity_map_on_identity_features_gives_identity() {
        let x = from_f64(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], DType::F64).unwrap();
        let k = to_array2(&kernel_matrix(&x, &IdentityMap).unwrap()).unwrap();
        assert_eq!(k, Array2::<f64>::eye(2));
    }

    #[test]
    fn structural_entry_at_one_sigma() {
        let r = RegionSet::with_generated_ids("s", vec![[0.0, 0.0], [0.3, 0.4], [0.0, 0.0]]).unwrap();
        let k = structural_kernel(&r, 0.5).unwrap();
        assert!((k[[0, 1]] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((k[[0, 1]] - 0.60653).abs() < 1e-5);
        assert_eq!(k[[0, 2]], 1.0);
        assert_eq!(k[[1, 1]], 1.0);
        assert_eq!(structural_kernel(&r, 0.0).unwrap_err().category(), "config");
    }

    #[test]
    fn non_finite_features_are_input_errors() {
        let x = from_f64(vec![1.0, f64::NAN], &[1, 2], DType::F64).unwrap();
        assert_eq!(kernel_matrix(&x, &IdentityMap).unwrap_err().category(), "input");
    }

    #[test]
    fn channel_counts_follow_kernel_count() {
        let r = RegionSet::with_generated_ids("s", vec![[0.0, 0.0], [0.5, 0.1], [0.2, 0.9]]).unwrap();
        let f = FeatureMatrix::new(Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64 * 0.1)).unwrap();
        for (l, expected) in [(1, 2), (8, 9)] {
            let store = ParamStore::new(DType::F32, 1);
            let cfg = KernelConfig { n_kernels: l, ..KernelConfig::default() };
            let maps = KernelMaps::new(&store.root(), 4, &cfg).unwrap();
            let mk = mk_tensor(&f, &r, &maps, DType::F32).unwrap();
            assert_eq!(mk.channels(), expected);
            assert_eq!(mk.n(), 3);
        }
    }

    #[test]
    fn single_map_matches_batched_channel() {
        let store = ParamStore::new(DType::F64, 2);
        let cfg = KernelConfig { n_kernels: 3, kernel_dim: 5, hidden_dim: 6 };
        let maps = KernelMaps::new(&store.root(), 4, &cfg).unwrap();
        let x = from_f64((0..20).map(|i| (i as f64 * 0.37).sin()).collect(), &[5, 4], DType::F64).unwrap();
        let all = gram(&maps.phi(&x).unwrap()).unwrap();
        let one = kernel_matrix(&x, &maps.map(1)).unwrap();
        assert_eq!(to_f64_vec(&all.get(1).unwrap()).unwrap(), to_f64_vec(&one).unwrap());
    }
}
