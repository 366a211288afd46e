//! Central finite-difference gradient checking.
//!
//! Compares tape gradients against `(f(x+h) − f(x−h)) / 2h` element by
//! element. Relative error is `|a − n| / max(|a|, |n|, 1e-4)`; the floor keeps
//! near-zero gradients from turning round-off into large ratios.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Checks d`f`/d`params` where `f` maps tape parameters to a scalar loss.
pub fn check<F>(params: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.param(p.clone())).collect();
        Ok(f(&tape, &vars)?.value().data()[0])
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = params.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[j], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}
