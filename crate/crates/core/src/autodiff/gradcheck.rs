use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    /// Per-coordinate `|g − g_fd| / max(|g|, |g_fd|, 1e-6·‖g‖∞)`; coordinates
    /// where all three are zero count as exact.
    pub max_rel_error: f64,
}

/// Tape gradient of the scalar `f(x)` with respect to `x`.
pub fn gradient<F>(f: &mut F, x: &Tensor) -> Result<(f64, Tensor)>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Dimension {
            op: "grad_check (non-scalar function)",
            lhs: tape.value(out).shape().to_vec(),
            rhs: vec![1],
        });
    }
    let value = tape.value(out).item();
    let grads = tape.backward(out)?;
    Ok((value, grads.get_or_zeros(xv, x)))
}

fn evaluate<F>(f: &mut F, x: Tensor) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = f(&mut tape, xv)?;
    Ok(tape.value(out).item())
}

/// Central-difference gradient `(f(x+h) − f(x−h)) / 2h`, one coordinate at a time.
pub fn finite_difference<F>(f: &mut F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut out = Tensor::zeros(x.shape());
    for k in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[k] += h;
        let mut minus = x.clone();
        minus.data_mut()[k] -= h;
        let fp = evaluate(f, plus)?;
        let fm = evaluate(f, minus)?;
        out.data_mut()[k] = (fp - fm) / (2.0 * h);
    }
    Ok(out)
}

pub fn compare(analytic: &Tensor, numeric: &Tensor) -> GradCheckReport {
    let scale = analytic.max_abs().max(numeric.max_abs());
    let floor = 1e-6 * scale;
    let mut max_abs_error = 0.0f64;
    let mut max_rel_error = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let abs = (a - n).abs();
        max_abs_error = max_abs_error.max(abs);
        let denom = a.abs().max(n.abs()).max(floor);
        if denom > 0.0 {
            max_rel_error = max_rel_error.max(abs / denom);
        }
    }
    GradCheckReport {
        max_abs_error,
        max_rel_error,
    }
}

/// Checks the tape gradient of scalar-valued `f` at `x` against central
/// differences with step `h`.
pub fn grad_check<F>(mut f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, analytic) = gradient(&mut f, x)?;
    let numeric = finite_difference(&mut f, x, h)?;
    Ok(compare(&analytic, &numeric))
}
