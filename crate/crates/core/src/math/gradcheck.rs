//! Central finite-difference checking for tape-built scalar functions.

use crate::error::Result;
use crate::math::dense::DenseMatrix;
use crate::math::tape::{Tape, Var};

/// Relative error with an absolute floor so that entries near zero are
/// compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `build` against the fourth-order central
/// difference `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h` over every
/// entry of every input. Each entry is differenced at steps `h`, `h/10` and
/// `h/100` and the closest estimate counts: with a large loss, small entries
/// need a long step to beat rounding while strongly curved ones need a short
/// step, and a wrong gradient disagrees at every step.
///
/// `build` receives one leaf per input and must return a scalar node.
/// Stop-gradient projection scalars are held at their base-point values
/// while differencing. Returns the largest relative error.
pub fn check_gradients<F>(inputs: &[DenseMatrix], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut t = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
    let out = build(&mut t, &leaves)?;
    let grads = t.backward(out)?;
    let frozen = t.stopped_coefficients();

    let eval = |vals: &[DenseMatrix]| -> Result<f64> {
        let mut t = Tape::with_frozen_coefficients(frozen.clone());
        let leaves: Vec<Var> = vals.iter().map(|m| t.leaf(m.clone())).collect();
        let out = build(&mut t, &leaves)?;
        Ok(t.scalar(out))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<DenseMatrix> = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf);
        for j in 0..inputs[i].values().len() {
            let orig = inputs[i].values()[j];
            let mut best = f64::INFINITY;
            for step in [h, h / 10.0, h / 100.0] {
                let mut at = |x: f64| {
                    work[i].values_mut()[j] = x;
                    eval(&work)
                };
                let (up1, down1) = (at(orig + step)?, at(orig - step)?);
                let (up2, down2) = (at(orig + 2.0 * step)?, at(orig - 2.0 * step)?);
                let numeric = (8.0 * (up1 - down1) - (up2 - down2)) / (12.0 * step);
                best = best.min(relative_error(analytic.values()[j], numeric));
            }
            work[i].values_mut()[j] = orig;
            worst = worst.max(best);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;

    fn input() -> Vec<DenseMatrix> {
        vec![DenseMatrix::from_vec(2, 2, vec![0.3, -1.2, 2.0, 0.7]).unwrap()]
    }

    #[test]
    fn accepts_a_correct_gradient() {
        let err = check_gradients(&input(), 1e-3, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let s = t.log_sigmoid(sq);
            Ok(t.sum(s))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // the differenced function carries an extra linear term the base
        // graph leaves out, so the tape gradient is off by one everywhere
        let calls = Cell::new(0);
        let err = check_gradients(&input(), 1e-3, |t, v| {
            calls.set(calls.get() + 1);
            let sq = t.sum_squares(v[0]);
            if calls.get() == 1 {
                Ok(sq)
            } else {
                let lin = t.sum(v[0]);
                t.add(sq, lin)
            }
        })
        .unwrap();
        assert!(err > 0.1, "{err}");
    }
}
