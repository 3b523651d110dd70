//! Central finite-difference check of analytic gradients.

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Compares the gradient of scalar-valued `f` at `x` against central
/// differences with step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let base = x.data().to_vec();
    let shape = x.shape().to_vec();

    let probe = Tensor::param(base.clone(), &shape)?;
    f(&probe)?.backward()?;
    let analytic = probe
        .grad()
        .map(|g| g.clone())
        .unwrap_or_else(|| vec![0.0; base.len()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(data, &shape)?;
        no_grad(|| f(&t))?.item()
    };

    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
