//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; [`Tape::backward`]
//! walks the list in reverse and accumulates gradients for every trainable leaf.
//! The tape is rebuilt for every forward pass and dropped after backward, which
//! matches the alternating generator/discriminator update pattern.

mod ops;
mod tape;

pub use tape::{GradientMap, Tape, Var};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max relative error between the analytic gradient of `f` at `point` and a
/// central finite difference with step `h`, taken over all coordinates.
///
/// `f` must produce a scalar loss from the single input variable.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument("grad_check step h must be > 0".into()));
    }
    // Analytic pass.
    let mut tape = Tape::new();
    let x = tape.leaf("x", point.clone());
    let loss = f(&mut tape, x)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::InvalidArgument("grad_check target must be scalar".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get("x")
        .cloned()
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(p.clone());
        let l = f(&mut t, x)?;
        Ok(t.value(l).values[0])
    };

    let mut max_err: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.values[i] += h;
        let mut minus = point.clone();
        minus.values[i] -= h;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        if !fd.is_finite() {
            return Err(Error::Numeric("non-finite finite-difference value".into()));
        }
        let err = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests;
