//! Central finite-difference checks against the analytic backward pass.

use rand::seq::index::sample;
use rand::Rng;

use super::layers::{Ctx, Mode};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with an absolute floor so that two tiny gradients agree.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compare analytic parameter gradients of `loss` with central differences on
/// up to `per_param` randomly chosen coordinates of every trainable tensor
/// (restricted to `only` when given).
pub fn check_params<F>(
    store: &ParamStore,
    mode: Mode,
    per_param: usize,
    only: Option<&[ParamId]>,
    rng: &mut impl Rng,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx) -> Result<Tensor>,
{
    let grads = {
        let mut ctx = Ctx::new(store, mode);
        let out = loss(&mut ctx)?;
        let g = ctx.g.backward(out)?;
        g.param_grads(&ctx.g)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut ctx = Ctx::new(s, mode);
        let out = loss(&mut ctx)?;
        Ok(ctx.g.scalar(out))
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (id, g) in &grads {
        if let Some(only) = only {
            if !only.contains(id) {
                continue;
            }
        }
        let n = g.len();
        let picks = sample(rng, n, per_param.min(n));
        for k in picks.iter() {
            let orig = work.values(*id)[k];
            work.values_mut(*id)[k] = orig + FD_STEP;
            let fp = eval(&work)?;
            work.values_mut(*id)[k] = orig - FD_STEP;
            let fm = eval(&work)?;
            work.values_mut(*id)[k] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = rel_error(g[k], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.entry(*id).name.clone(), k, g[k], numeric));
            }
        }
    }
    Ok(report)
}
