use alloc::format;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::{Error, Result, Tensor};

/// Compares reverse-mode gradients with central finite differences.
///
/// `f` records a scalar function of the parameters on a fresh tape. Returns
/// the maximum over every parameter entry of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 1e-8 && eps < 1e-3) {
        return Err(Error::Config(format!("grad_check epsilon {eps} outside (1e-8, 1e-3)")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = scalar_of(&tape, loss)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: f returned {base}")));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = scalar_of(&tape, loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check: f returned {v}")));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..work[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[k];
            let denom = 1.0f64.max(libm::fabs(a)).max(libm::fabs(numeric));
            worst = worst.max(libm::fabs(a - numeric) / denom);
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    tape.value(v)
        .item()
        .ok_or_else(|| Error::Contract("grad_check: function must return a scalar".into()))
}
