//! Central-finite-difference oracle for analytic gradients.
//!
//! The check perturbs sampled coordinates of each trainable parameter by
//! ±eps, reruns the loss, and compares the central difference against the
//! analytic gradient collected from one backward pass at the center point.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Loss evaluation hook: given the current parameter values, returns the loss
/// and, when asked, the analytic gradients keyed by parameter name.
pub type LossFn<'a> = dyn FnMut(&BTreeMap<String, Tensor>, bool) -> Result<(f64, BTreeMap<String, Vec<f64>>)> + 'a;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Parameter and coordinate where the worst error occurred.
    pub worst: Option<(String, usize)>,
}

/// Relative error between an analytic and a central-difference derivative.
pub fn relative_error(analytic: f64, difference: f64) -> f64 {
    (analytic - difference).abs() / analytic.abs().max(difference.abs()).max(1e-12)
}

/// Checks analytic gradients of `loss_fn` against central differences on up
/// to `coords_per_param` randomly sampled coordinates of every trainable
/// parameter. Frozen parameters must come back with no gradient; that is
/// asserted here rather than differentiated.
pub fn finite_difference_check(
    params: &mut BTreeMap<String, Tensor>,
    loss_fn: &mut LossFn,
    eps: f64,
    coords_per_param: usize,
    rng: &mut ChaCha12Rng,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(CoreError::InvalidConfig(format!("finite-difference eps {eps} outside (0, 1e-3]")));
    }
    let (center_loss, grads) = loss_fn(params, true)?;
    // determinism guard: the loss must reproduce exactly at the same point
    let (replay, _) = loss_fn(params, false)?;
    if replay != center_loss {
        return Err(CoreError::Degenerate(format!(
            "loss function is not deterministic: {center_loss} vs {replay}"
        )));
    }

    let names: Vec<String> = params.keys().cloned().collect();
    let mut report = GradCheckReport { max_rel_err: 0.0, coords_checked: 0, worst: None };
    for name in names {
        let trainable = params[&name].requires_grad;
        if !trainable {
            if grads.contains_key(&name) {
                return Err(CoreError::Degenerate(format!("frozen parameter {name} received a gradient")));
            }
            continue;
        }
        let analytic = grads
            .get(&name)
            .ok_or_else(|| CoreError::Degenerate(format!("no gradient returned for trainable parameter {name}")))?
            .clone();
        let n = params[&name].numel();
        let mut coords: Vec<usize> = (0..n).collect();
        coords.shuffle(rng);
        coords.truncate(coords_per_param.min(n));
        for &c in &coords {
            let original = params.get_mut(&name).unwrap().values_mut()[c];
            params.get_mut(&name).unwrap().values_mut()[c] = original + eps;
            let (up, _) = loss_fn(params, false)?;
            params.get_mut(&name).unwrap().values_mut()[c] = original - eps;
            let (down, _) = loss_fn(params, false)?;
            params.get_mut(&name).unwrap().values_mut()[c] = original;
            let diff = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[c], diff);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), c));
            }
        }
    }
    Ok(report)
}
