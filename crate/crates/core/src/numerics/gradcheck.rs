//! Central-difference checks of tape gradients through [`Tape::replay`].

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central difference of the scalar `out` with respect to entry `index` of `leaf`.
pub fn central_difference(tape: &Tape, out: Var, leaf: Var, index: usize, h: f64) -> Result<f64> {
    if tape.value(out).len() != 1 {
        return Err(Error::Contract("finite differences need a scalar output".into()));
    }
    let base = tape.value(leaf);
    let mut plus = base.clone();
    plus.data_mut()[index] += h;
    let mut minus = base.clone();
    minus.data_mut()[index] -= h;
    let fp = tape.replay(&[(leaf, plus)])?[out.id()].data()[0];
    let fm = tape.replay(&[(leaf, minus)])?[out.id()].data()[0];
    Ok((fp - fm) / (2.0 * h))
}

/// Worst relative disagreement between reverse-mode and central-difference
/// gradients of a scalar `out`, over at most `per_leaf` evenly spaced entries
/// of each leaf. Errors are measured against `max(|fd|, |ad|, floor)`.
pub fn max_relative_error(tape: &Tape, out: Var, leaves: &[Var], h: f64, per_leaf: usize, floor: f64) -> Result<f64> {
    let grads = tape.backward(out, Tensor::full(tape.shape(out), 1.0))?;
    let mut worst = 0.0f64;
    for &leaf in leaves {
        let ad = grads.wrt(leaf);
        let n = ad.len();
        let step = (n / per_leaf.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let fd = central_difference(tape, out, leaf, i, h)?;
            let a = ad.data()[i];
            let scale = fd.abs().max(a.abs()).max(floor);
            worst = worst.max((fd - a).abs() / scale);
        }
    }
    Ok(worst)
}
