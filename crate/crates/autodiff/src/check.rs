use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central
/// differences.
///
/// `f` receives a fresh tape and the input node and must return a
/// one-element node. Returns the largest per-coordinate
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let input = tape.variable(x.clone());
    let out = f(&mut tape, input)?;
    let analytic = tape.grad(out, &[input], false)?;
    let analytic = tape.value(analytic[0]).clone();

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.variable(point);
        let out = f(&mut tape, input)?;
        let v = tape.item(out)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "function value in finite-difference stencil".into(),
            });
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
