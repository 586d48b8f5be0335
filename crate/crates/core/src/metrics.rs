//! Flow-value and distributional metrics for generated OD matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::od::{ODMatrix, Scale};

pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cpc: f64,
    pub rmse: f64,
    pub nrmse: f64,
    pub jsd_inflow: f64,
    pub jsd_outflow: f64,
    pub jsd_odflow: f64,
}

impl MetricsReport {
    /// Unweighted mean of per-city reports.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        Some(MetricsReport {
            cpc: avg(|r| r.cpc),
            rmse: avg(|r| r.rmse),
            nrmse: avg(|r| r.nrmse),
            jsd_inflow: avg(|r| r.jsd_inflow),
            jsd_outflow: avg(|r| r.jsd_outflow),
            jsd_odflow: avg(|r| r.jsd_odflow),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub bins: usize,
    /// Whether intra-region flows enter the OD-flow distribution.
    pub odflow_include_diagonal: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            odflow_include_diagonal: false,
        }
    }
}

/// Sums in ascending order so the result depends only on the multiset of
/// terms, which makes every metric bitwise invariant under reindexing.
pub fn order_free_sum<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let mut v: Vec<f64> = terms.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Row sums (outflows) computed with [`order_free_sum`].
pub fn outflows(m: &ODMatrix) -> Vec<f64> {
    m.values().rows().into_iter().map(|r| order_free_sum(r.iter().copied())).collect()
}

/// Column sums (inflows) computed with [`order_free_sum`].
pub fn inflows(m: &ODMatrix) -> Vec<f64> {
    m.values().columns().into_iter().map(|c| order_free_sum(c.iter().copied())).collect()
}

fn check_pair(m: &ODMatrix, mhat: &ODMatrix) -> Result<()> {
    if m.side() != mhat.side() {
        return Err(Error::Dimension(format!(
            "truth is {0}x{0} but prediction is {1}x{1}",
            m.side(),
            mhat.side()
        )));
    }
    if m.scale() != Scale::Raw || mhat.scale() != Scale::Raw {
        return Err(Error::State("metrics expect raw-scale matrices".into()));
    }
    Ok(())
}

/// Common part of commuting. Two all-zero matrices count as a perfect match.
pub fn cpc(m: &ODMatrix, mhat: &ODMatrix) -> Result<f64> {
    check_pair(m, mhat)?;
    let pairs = || m.values().iter().zip(mhat.values());
    let common = order_free_sum(pairs().map(|(&a, &b)| a.min(b)));
    let total = order_free_sum(pairs().map(|(&a, &b)| a + b));
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * common / total)
}

pub fn rmse(m: &ODMatrix, mhat: &ODMatrix) -> Result<f64> {
    if m.side() != mhat.side() {
        return Err(Error::Dimension(format!(
            "truth is {0}x{0} but prediction is {1}x{1}",
            m.side(),
            mhat.side()
        )));
    }
    let n2 = m.values().len() as f64;
    let sq = order_free_sum(
        m.values()
            .iter()
            .zip(mhat.values())
            .map(|(a, b)| (a - b) * (a - b)),
    );
    Ok((sq / n2).sqrt())
}

/// RMSE divided by the population standard deviation of the truth entries.
pub fn nrmse(m: &ODMatrix, mhat: &ODMatrix) -> Result<f64> {
    let r = rmse(m, mhat)?;
    let n2 = m.values().len() as f64;
    let mean = order_free_sum(m.values().iter().copied()) / n2;
    let spread = order_free_sum(m.values().iter().map(|a| (a - mean) * (a - mean)));
    let denom = (spread / n2).sqrt();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric(
            "NRMSE is undefined for a constant truth matrix".into(),
        ));
    }
    Ok(r / denom)
}

/// Base-2 Jensen-Shannon divergence between two discrete distributions,
/// normalized internally. Terms with zero mass contribute nothing.
pub fn jsd_from_weights(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "distributions over {} and {} bins",
            p.len(),
            q.len()
        )));
    }
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    if !(sp > 0.0 && sq > 0.0) {
        return Err(Error::UndefinedMetric("JSD of an empty distribution".into()));
    }
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        let mid = 0.5 * (a + b);
        if a > 0.0 {
            acc += 0.5 * a * (a / mid).log2();
        }
        if b > 0.0 {
            acc += 0.5 * b * (b / mid).log2();
        }
    }
    Ok(acc.clamp(0.0, 1.0))
}

/// Shared histogram of two value lists over `bins` equal-width bins in
/// `log1p` space spanning the union range.
pub fn log1p_histograms(a: &[f64], b: &[f64], bins: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric(
            "JSD needs non-empty value lists on both sides".into(),
        ));
    }
    if a.iter().chain(b).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Input("histogram values must be finite and >= 0".into()));
    }
    let (lo, hi) = a
        .iter()
        .chain(b)
        .map(|v| v.ln_1p())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let width = (hi - lo) / bins as f64;
    let bin_of = |v: f64| -> usize {
        if width == 0.0 {
            return 0;
        }
        (((v.ln_1p() - lo) / width) as usize).min(bins - 1)
    };
    let count = |vals: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in vals {
            h[bin_of(v)] += 1.0;
        }
        h
    };
    Ok((count(a), count(b)))
}

pub fn jsd_histogram(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    let (ha, hb) = log1p_histograms(a, b, bins)?;
    jsd_from_weights(&ha, &hb)
}

pub fn evaluate(m: &ODMatrix, mhat: &ODMatrix) -> Result<MetricsReport> {
    evaluate_with(m, mhat, &EvalOptions::default())
}

pub fn evaluate_with(m: &ODMatrix, mhat: &ODMatrix, opts: &EvalOptions) -> Result<MetricsReport> {
    check_pair(m, mhat)?;
    let flows = |x: &ODMatrix| -> Vec<f64> {
        if opts.odflow_include_diagonal {
            x.values().iter().copied().collect()
        } else {
            x.off_diagonal()
        }
    };
    Ok(MetricsReport {
        cpc: cpc(m, mhat)?,
        rmse: rmse(m, mhat)?,
        nrmse: nrmse(m, mhat)?,
        jsd_inflow: jsd_histogram(&inflows(m), &inflows(mhat), opts.bins)?,
        jsd_outflow: jsd_histogram(&outflows(m), &outflows(mhat), opts.bins)?,
        jsd_odflow: jsd_histogram(&flows(m), &flows(mhat), opts.bins)?,
    })
}
