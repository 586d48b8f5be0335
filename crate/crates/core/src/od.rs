//! Regions, OD matrices, feature matrices and permutations.

use std::collections::HashSet;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    ids: Vec<String>,
    centroids: Vec<[f64; 2]>,
}

impl RegionSet {
    pub fn new(ids: Vec<String>, centroids: Vec<[f64; 2]>) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::Input(format!(
                "a region set needs at least 2 regions, got {}",
                ids.len()
            )));
        }
        if ids.len() != centroids.len() {
            return Err(Error::Dimension(format!(
                "{} region ids but {} centroids",
                ids.len(),
                centroids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Input(format!("duplicate region id {id:?}")));
            }
        }
        if centroids.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Input("non-finite centroid coordinate".into()));
        }
        Ok(Self { ids, centroids })
    }

    /// Regions named `{prefix}-r{i}` for each centroid.
    pub fn with_generated_ids(prefix: &str, centroids: Vec<[f64; 2]>) -> Result<Self> {
        let ids = (0..centroids.len())
            .map(|i| format!("{prefix}-r{i:03}"))
            .collect();
        Self::new(ids, centroids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn centroids(&self) -> &[[f64; 2]] {
        &self.centroids
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let [xi, yi] = self.centroids[i];
        let [xj, yj] = self.centroids[j];
        let (dx, dy) = (xi - xj, yi - yj);
        (dx * dx + dy * dy).sqrt()
    }

    pub fn distance_matrix(&self) -> Array2<f64> {
        let n = self.len();
        Array2::from_shape_fn((n, n), |(i, j)| self.distance(i, j))
    }

    pub fn permuted(&self, p: &Permutation) -> Result<Self> {
        p.check_len(self.len())?;
        Ok(Self {
            ids: p.mapping.iter().map(|&k| self.ids[k].clone()).collect(),
            centroids: p.mapping.iter().map(|&k| self.centroids[k]).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Raw,
    Log1p,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ODMatrix {
    values: Array2<f64>,
    scale: Scale,
}

impl ODMatrix {
    pub fn new(values: Array2<f64>, scale: Scale) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c {
            return Err(Error::Dimension(format!("OD matrix must be square, got {r}x{c}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("OD matrix has non-finite entries".into()));
        }
        if scale == Scale::Raw && values.iter().any(|&v| v < 0.0) {
            return Err(Error::Input("raw OD matrix has negative entries".into()));
        }
        Ok(Self { values, scale })
    }

    pub fn raw(values: Array2<f64>) -> Result<Self> {
        Self::new(values, Scale::Raw)
    }

    pub fn side(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values.sum_axis(Axis(1)).to_vec()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.values.sum_axis(Axis(0)).to_vec()
    }

    /// All entries with `i != j`, row-major.
    pub fn off_diagonal(&self) -> Vec<f64> {
        self.values
            .indexed_iter()
            .filter(|((i, j), _)| i != j)
            .map(|(_, &v)| v)
            .collect()
    }
}

/// Element-wise `ln(1 + x)`; flips the scale tag to `Log1p`.
pub fn log_transform(m: &ODMatrix) -> Result<ODMatrix> {
    if m.scale != Scale::Raw {
        return Err(Error::State("log_transform expects a raw-scale matrix".into()));
    }
    Ok(ODMatrix {
        values: m.values.mapv(f64::ln_1p),
        scale: Scale::Log1p,
    })
}

/// Element-wise `exp(x) - 1` clamped at zero; flips the scale tag to `Raw`.
pub fn log_inverse(m: &ODMatrix) -> Result<ODMatrix> {
    if m.scale != Scale::Log1p {
        return Err(Error::State("log_inverse expects a log1p-scale matrix".into()));
    }
    Ok(ODMatrix {
        values: m.values.mapv(|v| v.exp_m1().max(0.0)),
        scale: Scale::Raw,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    vectors: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if vectors.ncols() == 0 {
            return Err(Error::Input("feature dimension must be positive".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature matrix has non-finite entries".into()));
        }
        Ok(Self { vectors })
    }

    pub fn rows(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn permuted(&self, p: &Permutation) -> Result<Self> {
        p.check_len(self.rows())?;
        Ok(Self {
            vectors: self.vectors.select(Axis(0), &p.mapping),
        })
    }
}

/// A bijection on `0..n`, stored 0-based. Position `i` of a permuted object
/// holds element `mapping[i]` of the original.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(mapping: Vec<usize>) -> Result<Self> {
        Self::new(mapping)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.mapping
    }
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &k in &mapping {
            if k >= n || std::mem::replace(&mut seen[k], true) {
                return Err(Error::Input(format!(
                    "not a permutation of 0..{n}: {mapping:?}"
                )));
            }
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    /// Fixes every index outside a uniformly drawn subset of size
    /// `ceil(intensity * n)` and uniformly shuffles that subset.
    pub fn random(n: usize, intensity: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&intensity) {
            return Err(Error::Config(format!(
                "permutation intensity must lie in [0, 1], got {intensity}"
            )));
        }
        // 0.3 * 10 is 3.0000000000000004 in binary floating point.
        let k = ((intensity * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
        let mut mapping: Vec<usize> = (0..n).collect();
        if k < 2 {
            return Ok(Self { mapping });
        }
        let mut rng = seed::rng_for(seed, &[n as u64, k as u64]);
        let mut positions = index::sample(&mut rng, n, k).into_vec();
        positions.sort_unstable();
        let mut targets = positions.clone();
        targets.shuffle(&mut rng);
        for (&pos, &tgt) in positions.iter().zip(&targets) {
            mapping[pos] = tgt;
        }
        Ok(Self { mapping })
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.mapping
    }

    pub fn get(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &k)| i == k)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &k) in self.mapping.iter().enumerate() {
            inv[k] = i;
        }
        Self { mapping: inv }
    }

    /// The permutation `r` with `apply(m, r) == apply(apply(m, inner), self)`.
    pub fn compose(&self, inner: &Permutation) -> Result<Self> {
        inner.check_len(self.len())?;
        Ok(Self {
            mapping: self.mapping.iter().map(|&k| inner.mapping[k]).collect(),
        })
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(Error::Dimension(format!(
                "permutation of length {} applied to size {n}",
                self.len()
            )));
        }
        Ok(())
    }

    /// `out[i, j] = values[p(i), p(j)]`.
    pub fn apply_array(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        let (r, c) = values.dim();
        if r != c {
            return Err(Error::Dimension(format!("expected a square matrix, got {r}x{c}")));
        }
        self.check_len(r)?;
        Ok(Array2::from_shape_fn((r, r), |(i, j)| {
            values[[self.mapping[i], self.mapping[j]]]
        }))
    }
}

/// Reindexes both axes: `m'[i, j] = m[p(i), p(j)]`.
pub fn permutation_apply(m: &ODMatrix, p: &Permutation) -> Result<ODMatrix> {
    Ok(ODMatrix {
        values: p.apply_array(&m.values)?,
        scale: m.scale,
    })
}
