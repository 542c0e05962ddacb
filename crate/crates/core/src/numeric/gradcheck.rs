//! Central-difference gradient oracle.

use crate::error::Result;

use super::params::{ParamId, ParamStore};

/// Central differences of a scalar function of a flat vector.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut p = point.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences of `loss` with respect to stored parameters.
///
/// `coords` limits how many coordinates per parameter are probed (evenly
/// strided, always including the first); `None` probes all of them.
/// Returns, per parameter, the probed flat indices and their estimates.
pub fn finite_diff_grad(
    mut loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    h: f64,
    coords: Option<usize>,
) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
    let mut out = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.get(id).numel();
        let idx = probe_indices(n, coords);
        let mut est = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            est.push((up - down) / (2.0 * h));
        }
        out.push((idx, est));
    }
    Ok(out)
}

pub fn probe_indices(n: usize, coords: Option<usize>) -> Vec<usize> {
    match coords {
        Some(k) if k < n => {
            let stride = n as f64 / k as f64;
            (0..k).map(|j| (j as f64 * stride) as usize).collect()
        }
        _ => (0..n).collect(),
    }
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps coordinates whose true
/// gradient is zero from producing unbounded ratios out of rounding noise.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}
