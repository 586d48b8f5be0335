//! Central finite-difference comparison against autograd gradients.

use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{from_f64, scalar, to_f64_vec};

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Worst relative error `|a - n| / max(|a|, |n|)` over checked tensors.
    pub max_rel_err: f64,
    pub worst: String,
    /// Tensors whose analytic and numeric gradients were both negligible.
    pub negligible: Vec<String>,
    pub checked: usize,
}

/// Checks up to `per_tensor` evenly spaced entries of each named variable.
/// Errors are measured on the vector of checked entries of one tensor.
pub fn check_vars<F>(vars: &[(String, Var)], loss: F, per_tensor: usize, h: f64) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor>,
{
    let grads = loss()?.backward()?;
    let mut rep = GradReport { max_rel_err: 0.0, worst: String::new(), negligible: Vec::new(), checked: 0 };
    for (name, var) in vars {
        let base = to_f64_vec(var.as_tensor())?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_f64_vec(g)?,
            None => vec![0.0; base.len()],
        };
        let step = (base.len() / per_tensor.max(1)).max(1);
        let idx: Vec<usize> = (0..base.len()).step_by(step).take(per_tensor).collect();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&from_f64(v, var.dims(), var.dtype())?)?;
                scalar(&loss()?)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        var.set(&from_f64(base, var.dims(), var.dtype())?)?;
        rep.checked += idx.len();
        let scale = na.sqrt().max(nn.sqrt());
        if scale < 1e-9 {
            rep.negligible.push(name.clone());
            continue;
        }
        let rel = diff.sqrt() / scale;
        if rel >= rep.max_rel_err {
            rep.max_rel_err = rel;
            rep.worst = name.clone();
        }
    }
    Ok(rep)
}

/// [`check_vars`] over every variable of `store`.
pub fn check_store<F>(store: &ParamStore, loss: F, per_tensor: usize, h: f64) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor>,
{
    check_vars(&store.vars(), loss, per_tensor, h)
}
