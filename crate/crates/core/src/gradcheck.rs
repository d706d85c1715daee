//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`,
/// where `numeric` is the central difference of `f` at `x` with step `eps`.
///
/// The step actually taken is recomputed from the perturbed `f32` values, so
/// rounding of `x ± eps` does not bias the quotient.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, analytic: &[f64], eps: f32) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps}"
        )));
    }
    if analytic.len() != x.numel() {
        return Err(Error::ShapeMismatch(format!(
            "{} analytic partials for {} coordinates",
            analytic.len(),
            x.numel()
        )));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let (hi, lo) = (orig + eps, orig - eps);
        probe.data_mut()[i] = hi;
        let f_hi = finite(f(&probe)?, i)?;
        probe.data_mut()[i] = lo;
        let f_lo = finite(f(&probe)?, i)?;
        probe.data_mut()[i] = orig;
        let numeric = (f_hi - f_lo) / (hi as f64 - lo as f64);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

fn finite(v: f64, i: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!(
            "objective at perturbed coordinate {i}"
        )))
    }
}

/// Checks reverse-mode gradients of a tape-built scalar objective with
/// respect to `x`. `build` receives a fresh 64-bit tape and the leaf for `x`.
pub fn tape_gradient_error<F>(build: F, x: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    let leaf = tape.param(x);
    let out = build(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = match tape.grad(leaf) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };
    finite_diff_check(
        |t| {
            let mut tape = Tape::<f64>::new();
            let leaf = tape.constant(t);
            let out = build(&mut tape, leaf)?;
            Ok(tape.scalar(out))
        },
        x,
        &analytic,
        eps,
    )
}
