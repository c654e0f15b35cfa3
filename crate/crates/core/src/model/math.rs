//! Scalar abstraction and the small nonlinear pieces shared by forward and
//! backward passes. The model is generic over `Scalar` so the same code runs
//! in f32 for speed and f64 for finite-difference verification.

use ndarray::{Array1, ArrayView1, ArrayViewMut1, LinalgScalar, ScalarOperand};
use num_traits::Float;

pub trait Scalar:
    LinalgScalar
    + Float
    + ScalarOperand
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub const RMS_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU; smooth everywhere so finite differences behave.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

pub fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

/// y = x * g / sqrt(mean(x^2) + eps). Returns the inverse RMS so backward can
/// reuse it.
pub fn rmsnorm_row<S: Scalar>(x: ArrayView1<S>, gain: ArrayView1<S>, mut out: ArrayViewMut1<S>) -> S {
    let d = S::from_f64(x.len() as f64);
    let mut ss = S::zero();
    for &v in x {
        ss = ss + v * v;
    }
    let inv = (ss / d + S::from_f64(RMS_EPS)).sqrt().recip();
    for ((o, &v), &g) in out.iter_mut().zip(x.iter()).zip(gain.iter()) {
        *o = v * inv * g;
    }
    inv
}

/// Given dy of a row, accumulates dgain and writes dx.
/// dx = g*dy*r - x * r^3/D * dot(g*dy, x)
pub fn rmsnorm_row_backward<S: Scalar>(
    x: ArrayView1<S>,
    gain: ArrayView1<S>,
    inv: S,
    dy: ArrayView1<S>,
    mut dgain: ArrayViewMut1<S>,
    mut dx: ArrayViewMut1<S>,
) {
    let d = S::from_f64(x.len() as f64);
    let mut dot = S::zero();
    for ((&xv, &g), &dyv) in x.iter().zip(gain.iter()).zip(dy.iter()) {
        dot = dot + g * dyv * xv;
    }
    let coeff = inv * inv * inv / d * dot;
    for (((dxv, &xv), &g), &dyv) in dx.iter_mut().zip(x.iter()).zip(gain.iter()).zip(dy.iter()) {
        *dxv = *dxv + g * dyv * inv - xv * coeff;
    }
    for ((dg, &xv), &dyv) in dgain.iter_mut().zip(x.iter()).zip(dy.iter()) {
        *dg = *dg + dyv * xv * inv;
    }
}

/// In-place numerically stable softmax over a slice.
pub fn softmax_slice<S: Scalar>(row: &mut [S]) {
    let mut max = S::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Softmax jacobian-vector product: ds = p * (dp - dot(dp, p)).
pub fn softmax_backward_slice<S: Scalar>(p: &[S], dp: &[S], ds: &mut [S]) {
    let mut dot = S::zero();
    for (&pv, &dpv) in p.iter().zip(dp.iter()) {
        dot = dot + pv * dpv;
    }
    for ((d, &pv), &dpv) in ds.iter_mut().zip(p.iter()).zip(dp.iter()) {
        *d = pv * (dpv - dot);
    }
}

/// Log-softmax of one logits row, written into `out`.
pub fn log_softmax_row<S: Scalar>(row: ArrayView1<S>, out: &mut Array1<S>) {
    let mut max = S::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        *o = v - lse;
    }
}

/// Index of the maximum value; ties resolve to the lowest index so greedy
/// decoding is deterministic.
pub fn argmax<S: Scalar>(row: ArrayView1<S>) -> usize {
    let mut best = 0;
    let mut best_v = S::neg_infinity();
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
