//! Finite-difference gradient verification.
//!
//! Always runs in `f64`: the analytic gradients are compared against central
//! differences computed by re-evaluating the loss with each parameter element
//! nudged by ±h. An element passes when the difference is within `rel_tol`
//! of the larger magnitude, or under the `abs_tol` floor for near-zero pairs.

use crate::error::Result;
use crate::tensor::store::{GradientMap, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_REL_TOL: f64 = 1e-4;
pub const DEFAULT_ABS_TOL: f64 = 1e-6;

/// One element whose analytic and numeric gradients disagree.
#[derive(Debug, Clone)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CompareReport {
    pub checked: usize,
    pub max_abs_diff: f64,
    pub mismatches: Vec<Mismatch>,
}

impl CompareReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Central-difference gradients of `loss` for every named parameter,
/// one element at a time.
pub fn finite_difference<F>(store: &ParamStore<f64>, loss: F, h: f64) -> Result<GradientMap<f64>>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
{
    let mut probe = store.clone();
    let names: Vec<String> = store.names().cloned().collect();
    let mut map = GradientMap::new();
    for name in names {
        let numel = store.get(&name).expect("name from store").numel();
        let shape = store.get(&name).expect("name from store").shape().to_vec();
        let mut grad = vec![0.0f64; numel];
        for (i, slot) in grad.iter_mut().enumerate() {
            let orig = probe.get(&name).expect("probe mirrors store").data()[i];
            probe
                .get_mut(&name)
                .expect("probe mirrors store")
                .data_mut()[i] = orig + h;
            let up = loss(&probe)?;
            probe
                .get_mut(&name)
                .expect("probe mirrors store")
                .data_mut()[i] = orig - h;
            let down = loss(&probe)?;
            probe
                .get_mut(&name)
                .expect("probe mirrors store")
                .data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        map.insert(name, crate::tensor::Tensor::from_vec(shape, grad)?);
    }
    Ok(map)
}

/// Element-by-element comparison over the union of both maps; a gradient
/// missing on one side is treated as zero.
pub fn compare(
    analytic: &GradientMap<f64>,
    numeric: &GradientMap<f64>,
    rel_tol: f64,
    abs_tol: f64,
) -> CompareReport {
    let mut names: Vec<&str> = analytic.iter().map(|(n, _)| n.as_str()).collect();
    for (n, _) in numeric.iter() {
        if !analytic.contains(n) {
            names.push(n.as_str());
        }
    }
    let mut report = CompareReport::default();
    let zero: Vec<f64> = Vec::new();
    for name in names {
        let a = analytic.get(name).map(|t| t.data()).unwrap_or(&zero);
        let b = numeric.get(name).map(|t| t.data()).unwrap_or(&zero);
        let numel = a.len().max(b.len());
        for i in 0..numel {
            let av = a.get(i).copied().unwrap_or(0.0);
            let bv = b.get(i).copied().unwrap_or(0.0);
            let diff = (av - bv).abs();
            report.checked += 1;
            report.max_abs_diff = report.max_abs_diff.max(diff);
            let scale = av.abs().max(bv.abs());
            if diff > rel_tol * scale && diff > abs_tol {
                report.mismatches.push(Mismatch {
                    name: name.to_string(),
                    index: i,
                    analytic: av,
                    numeric: bv,
                });
            }
        }
    }
    report
}

/// FD-check `loss_and_grads` (which must return both the loss value and the
/// analytic gradients for one fixed computation) at default tolerances.
pub fn verify<F>(store: &ParamStore<f64>, loss_and_grads: F) -> Result<CompareReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, GradientMap<f64>)>,
{
    let (_, analytic) = loss_and_grads(store)?;
    let numeric = finite_difference(store, |s| loss_and_grads(s).map(|(l, _)| l), DEFAULT_STEP)?;
    Ok(compare(
        &analytic,
        &numeric,
        DEFAULT_REL_TOL,
        DEFAULT_ABS_TOL,
    ))
}
