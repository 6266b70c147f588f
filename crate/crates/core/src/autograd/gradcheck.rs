//! Central finite-difference verification of analytic gradients.

use crate::autograd::tape::{Tape, Var};
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare the analytic gradient of a scalar-valued function against central
/// finite differences, element by element, and return the maximum relative
/// error `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf_grad(x.clone());
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::invalid(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            tape.value(y).shape()
        )));
    }
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::no_grad();
        let v = t.leaf_grad(probe.clone());
        let out = f(&mut t, v)?;
        t.value(out).item()
    };

    let mut max_rel: f64 = 0.0;
    for i in 0..x.numel() {
        let mut hi = x.clone();
        hi.data_mut()[i] += eps;
        let mut lo = x.clone();
        lo.data_mut()[i] -= eps;
        let numeric = (eval(&hi)? - eval(&lo)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
