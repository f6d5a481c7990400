//! Central finite-difference validation of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `h`, over every coordinate of `x`.
///
/// Relative error per coordinate is `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn fd_grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    fd_grad_check_coords(f, x, h, &coords)
}

/// As [`fd_grad_check`], restricted to the listed coordinates.
pub fn fd_grad_check_coords<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v);
        let y = tape.scalar(out);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite(format!("objective evaluated to {y}")))
        }
    };

    let mut tape = Tape::new();
    let v = tape.variable(x.clone());
    let out = f(&mut tape, v);
    if tape.value(out).len() != 1 {
        return Err(Error::Shape("gradient check needs a scalar objective".into()));
    }
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFinite("objective is not finite at x".into()));
    }
    let grads = tape.backward(out);
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let ad = analytic.data()[i];
        let rel = (ad - numeric).abs() / ad.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
