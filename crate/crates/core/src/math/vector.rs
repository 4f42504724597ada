//! Row- and vector-level kernels shared by the tape and the plain scoring path.

use crate::math::dense::{dot, DenseMatrix};

/// Norm below which a projection target is treated as degenerate.
pub const EPS_NORM: f64 = 1e-12;

/// Coefficient `(a·b)/|b|²` of the projection of `a` onto `b`, or `0` when
/// `|b| < EPS_NORM`.
#[inline]
pub fn projection_coef(a: &[f64], b: &[f64]) -> f64 {
    let bb = dot(b, b);
    if bb.sqrt() < EPS_NORM {
        0.0
    } else {
        dot(a, b) / bb
    }
}

/// Component of `a` collinear with `b`.
pub fn project(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "project: length mismatch");
    let c = projection_coef(a, b);
    b.iter().map(|x| c * x).collect()
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    out
}

/// Softmax applied independently to every row.
pub fn rowwise_softmax(x: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        softmax_into(x.row(r), out.row_mut(r));
    }
    out
}

/// `ln σ(x)` without overflow for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
