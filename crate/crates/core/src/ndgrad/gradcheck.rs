use super::{Tensor, Value};
use crate::{Error, Result};

/// Compares reverse-mode gradients of `f` at `x0` against central differences
/// with step `h`. Returns the worst coordinate-wise relative error
/// `|a - n| / max(1, |a|, |n|)`.
pub fn gradcheck(f: impl Fn(&Value) -> Value, x0: &Tensor, h: f64) -> Result<f64> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("gradcheck step must be positive, got {h}")));
    }
    let x = Value::param(x0.clone());
    let y = f(&x);
    if !y.item().is_finite() {
        return Err(Error::NonFinite("gradcheck objective at x0".into()));
    }
    y.backward();
    let analytic = x.grad();

    let eval = |t: Tensor| -> Result<f64> {
        let v = f(&Value::constant(t)).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("gradcheck objective at a probe point".into()))
        }
    };
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
