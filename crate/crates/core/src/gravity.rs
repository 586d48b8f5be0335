//! Gravity-law baselines with power-law (GM-P) or exponential (GM-E)
//! distance decay, fitted by least squares on log flows.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::CityBundle;
use crate::error::{Error, Result};
use crate::metrics::outflows;
use crate::od::{ODMatrix, Permutation, RegionSet};
use crate::robustness::FlowGenerator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayForm {
    /// `f(d) = d^-gamma`
    Power,
    /// `f(d) = exp(-gamma d)`
    Exponential,
}

impl DecayForm {
    fn regressor(self, d: f64) -> f64 {
        match self {
            DecayForm::Power => d.ln(),
            DecayForm::Exponential => d,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DecayForm::Power => "GM-P",
            DecayForm::Exponential => "GM-E",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityParams {
    pub form: DecayForm,
    pub scale: f64,
    pub decay: f64,
}

/// One training city for the gravity fit.
pub struct GravityObservation<'a> {
    pub od: &'a ODMatrix,
    pub regions: &'a RegionSet,
    pub masses: &'a [f64],
}

pub fn gravity_fit(obs: &[GravityObservation<'_>], form: DecayForm) -> Result<GravityParams> {
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for o in obs {
        let side = o.od.side();
        if o.regions.len() != side || o.masses.len() != side {
            return Err(Error::Dimension(format!(
                "gravity observation with {side}x{side} OD, {} regions, {} masses",
                o.regions.len(),
                o.masses.len()
            )));
        }
        let v = o.od.values();
        for i in 0..side {
            for j in 0..side {
                let (flow, d) = (v[[i, j]], o.regions.distance(i, j));
                if i == j || flow <= 0.0 || d <= 0.0 || o.masses[i] <= 0.0 || o.masses[j] <= 0.0 {
                    continue;
                }
                let y = flow.ln() - o.masses[i].ln() - o.masses[j].ln();
                let x = form.regressor(d);
                n += 1.0;
                sx += x;
                sy += y;
                sxx += x * x;
                sxy += x * y;
            }
        }
    }
    if n < 2.0 {
        return Err(Error::Fit("no positive flows to fit a gravity model on".into()));
    }
    let var = sxx - sx * sx / n;
    if var <= 0.0 {
        return Err(Error::Fit("all pair distances are identical".into()));
    }
    let slope = (sxy - sx * sy / n) / var;
    let intercept = (sy - slope * sx) / n;
    let decay = -slope;
    if !(decay > 0.0 && decay.is_finite()) {
        return Err(Error::Fit(format!(
            "fitted decay coefficient {decay} is not positive"
        )));
    }
    Ok(GravityParams {
        form,
        scale: intercept.exp(),
        decay,
    })
}

/// Fits on training cities using each city's outflows as its masses.
pub fn gravity_fit_cities(cities: &[&CityBundle], form: DecayForm) -> Result<GravityParams> {
    let masses: Vec<Vec<f64>> = cities.iter().map(|c| outflows(&c.od)).collect();
    let obs: Vec<GravityObservation<'_>> = cities
        .iter()
        .zip(&masses)
        .map(|(c, m)| GravityObservation {
            od: &c.od,
            regions: &c.regions,
            masses: m,
        })
        .collect();
    gravity_fit(&obs, form)
}

/// `C m_i m_j f(d_ij)` off the diagonal, zero on it.
pub fn gravity_predict(params: &GravityParams, regions: &RegionSet, masses: &[f64]) -> Result<ODMatrix> {
    let n = regions.len();
    if masses.len() != n {
        return Err(Error::Dimension(format!("{n} regions but {} masses", masses.len())));
    }
    let decay = |d: f64| match params.form {
        DecayForm::Power => d.powf(-params.decay),
        DecayForm::Exponential => (-params.decay * d).exp(),
    };
    let values = Array2::from_shape_fn((n, n), |(i, j)| {
        let d = regions.distance(i, j);
        if i == j || d <= 0.0 {
            0.0
        } else {
            params.scale * masses[i] * masses[j] * decay(d)
        }
    });
    ODMatrix::raw(values)
}

/// Gravity baseline as a generator: masses are the ground-truth outflows of
/// the (permuted) city.
impl FlowGenerator for GravityParams {
    fn generate(&self, city: &CityBundle, perm: &Permutation, _seed: u64) -> Result<ODMatrix> {
        let city = city.permuted(perm)?;
        gravity_predict(self, &city.regions, &outflows(&city.od))
    }

    fn name(&self) -> String {
        self.form.label().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_city, CorpusConfig};

    #[test]
    fn exponential_law_is_recovered_without_noise() {
        let cfg = CorpusConfig {
            n_cities: 6,
            noise_level: 0.0,
            seed: 11,
            ..CorpusConfig::default()
        };
        let cities: Vec<_> = (0..cfg.n_cities).map(|i| generate_city(&cfg, i).unwrap()).collect();
        let obs: Vec<_> = cities
            .iter()
            .map(|c| GravityObservation {
                od: &c.od,
                regions: &c.regions,
                masses: c.masses.as_deref().unwrap(),
            })
            .collect();
        let p = gravity_fit(&obs, DecayForm::Exponential).unwrap();
        assert!((p.decay - 1.0 / cfg.rho).abs() < 1e-3, "{}", p.decay);
        assert!((p.scale - 1.0).abs() < 1e-6, "{}", p.scale);
    }

    #[test]
    fn symmetric_inputs_give_symmetric_predictions_and_mass_scaling() {
        let regions = RegionSet::with_generated_ids("t", vec![[0.0, 0.0], [0.3, 0.1], [0.9, 0.5]]).unwrap();
        let params = GravityParams { form: DecayForm::Power, scale: 0.7, decay: 1.5 };
        let masses = [2.0, 5.0, 1.0];
        let p = gravity_predict(&params, &regions, &masses).unwrap();
        let v = p.values();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(v[[i, j]], v[[j, i]]);
            }
        }
        let doubled: Vec<f64> = masses.iter().map(|m| 2.0 * m).collect();
        let q = gravity_predict(&params, &regions, &doubled).unwrap();
        for (a, b) in v.iter().zip(q.values()) {
            assert!((4.0 * a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn fit_without_positive_flows_fails() {
        let regions = RegionSet::with_generated_ids("z", vec![[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let od = ODMatrix::raw(Array2::zeros((2, 2))).unwrap();
        let obs = [GravityObservation { od: &od, regions: &regions, masses: &[1.0, 1.0] }];
        assert_eq!(gravity_fit(&obs, DecayForm::Power).unwrap_err().category(), "fit");
    }
}
