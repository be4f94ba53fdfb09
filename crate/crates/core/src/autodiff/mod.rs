//! Scalar automatic differentiation.
//!
//! Three number types implement [`Scalar`]:
//!
//! * `f64` for plain evaluation,
//! * [`Var`], a reverse-mode variable recorded on a [`Tape`],
//! * [`Dual<T>`], a forward-mode dual number over any of the above.
//!
//! `Dual<Var>` carries a directional derivative *through* the tape, so a loss
//! that contains Jacobian traces of a network can be differentiated with
//! respect to the network parameters exactly.
//!
//! ```
//! use cnfm::autodiff::{gradient, Scalar};
//!
//! let (value, grad) = gradient(&[3.0], |_, theta| theta[0] * theta[0]);
//! assert_eq!(value, 9.0);
//! assert_eq!(grad, vec![6.0]);
//! ```

mod dual;
mod tape;
mod trace;

use std::ops::{Add, Div, Mul, Neg, Sub};

pub use dual::Dual;
pub use tape::{gradient, Tape, Var};
pub use trace::{
    directional_derivative, jacobian_trace_exact, jacobian_trace_exact_with_output,
    jacobian_trace_hutchinson, jacobian_trace_hutchinson_with_output, rademacher_probe,
};

/// A dense layer `y = W x + b` whose weights live in a flat parameter vector.
#[derive(Clone, Copy, Debug)]
pub struct Affine<'a> {
    /// Row-major `n_out x n_in` block.
    pub weights: &'a [f64],
    pub bias: &'a [f64],
    /// Index of `weights[0]` in the parameter vector.
    pub weight_offset: usize,
    /// Index of `bias[0]` in the parameter vector.
    pub bias_offset: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl Affine<'_> {
    pub(crate) fn apply_f64(&self, x: &[f64], with_bias: bool) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_in);
        self.weights
            .chunks_exact(self.n_in)
            .enumerate()
            .map(|(j, row)| {
                let b = if with_bias { self.bias[j] } else { 0.0 };
                b + dot8(row, x)
            })
            .collect()
    }
}

/// Dot product with eight independent partial sums, so the loop vectorizes.
/// The summation order is fixed, so results are reproducible.
pub(crate) fn dot8(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0_f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a * x` in blocks of eight.
pub(crate) fn axpy8(y: &mut [f64], a: f64, x: &[f64]) {
    let n = y.len().min(x.len());
    let (y, x) = (&mut y[..n], &x[..n]);
    let mut cy = y.chunks_exact_mut(8);
    let mut cx = x.chunks_exact(8);
    for (yy, xx) in (&mut cy).zip(&mut cx) {
        for k in 0..8 {
            yy[k] += a * xx[k];
        }
    }
    for (yy, xx) in cy.into_remainder().iter_mut().zip(cx.remainder()) {
        *yy += a * xx;
    }
}

/// Arithmetic shared by every differentiable number type.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Primal value.
    fn value(&self) -> f64;

    /// A constant in the same context as `self` (same tape, zero tangent).
    fn lift(&self, c: f64) -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;

    /// `1 - self^2`, the derivative of `tanh` expressed through its output.
    fn one_minus_square(self) -> Self;

    /// `W x (+ b)`.
    fn affine(layer: &Affine<'_>, x: &[Self], with_bias: bool) -> Vec<Self>;

    /// `W x_s` for several inputs, with the bias added to the first only.
    fn affine_sets(layer: &Affine<'_>, sets: &[Vec<Self>], with_bias: bool) -> Vec<Vec<Self>> {
        sets.iter()
            .enumerate()
            .map(|(s, x)| Self::affine(layer, x, with_bias && s == 0))
            .collect()
    }

    fn powi(self, n: u32) -> Self {
        let mut acc = self.lift(1.0);
        for _ in 0..n {
            acc = acc * self;
        }
        acc
    }
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }

    fn lift(&self, c: f64) -> Self {
        c
    }

    fn exp(self) -> Self {
        f64::exp(self)
    }

    fn ln(self) -> Self {
        f64::ln(self)
    }

    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }

    fn tanh(self) -> Self {
        f64::tanh(self)
    }

    fn sigmoid(self) -> Self {
        sigmoid(self)
    }

    fn softplus(self) -> Self {
        softplus(self)
    }

    fn one_minus_square(self) -> Self {
        1.0 - self * self
    }

    fn affine(layer: &Affine<'_>, x: &[Self], with_bias: bool) -> Vec<Self> {
        layer.apply_f64(x, with_bias)
    }

    fn powi(self, n: u32) -> Self {
        f64::powi(self, n as i32)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
