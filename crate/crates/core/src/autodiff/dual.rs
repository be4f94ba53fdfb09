use std::ops::{Add, Div, Mul, Neg, Sub};

use super::{Affine, Scalar};

/// Forward-mode dual number `value + tangent * eps` over any [`Scalar`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T> {
    pub value: T,
    pub tangent: T,
}

impl<T: Scalar> Dual<T> {
    pub fn new(value: T, tangent: T) -> Self {
        Self { value, tangent }
    }

    pub fn constant(value: T) -> Self {
        Self {
            value,
            tangent: value.lift(0.0),
        }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Dual::new(self.value + rhs.value, self.tangent + rhs.tangent)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Dual::new(self.value - rhs.value, self.tangent - rhs.tangent)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Dual::new(
            self.value * rhs.value,
            self.value * rhs.tangent + self.tangent * rhs.value,
        )
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        Dual::new(q, (self.tangent - q * rhs.tangent) / rhs.value)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.value, -self.tangent)
    }
}

impl<T: Scalar> Add<f64> for Dual<T> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        Dual::new(self.value + rhs, self.tangent)
    }
}

impl<T: Scalar> Sub<f64> for Dual<T> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        Dual::new(self.value - rhs, self.tangent)
    }
}

impl<T: Scalar> Mul<f64> for Dual<T> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        Dual::new(self.value * rhs, self.tangent * rhs)
    }
}

impl<T: Scalar> Div<f64> for Dual<T> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        Dual::new(self.value / rhs, self.tangent / rhs)
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn value(&self) -> f64 {
        self.value.value()
    }

    fn lift(&self, c: f64) -> Self {
        Dual::constant(self.value.lift(c))
    }

    fn exp(self) -> Self {
        let y = self.value.exp();
        Dual::new(y, self.tangent * y)
    }

    fn ln(self) -> Self {
        Dual::new(self.value.ln(), self.tangent / self.value)
    }

    fn sqrt(self) -> Self {
        let y = self.value.sqrt();
        Dual::new(y, self.tangent / (y * 2.0))
    }

    fn tanh(self) -> Self {
        let y = self.value.tanh();
        Dual::new(y, self.tangent * y.one_minus_square())
    }

    fn sigmoid(self) -> Self {
        let s = self.value.sigmoid();
        Dual::new(s, self.tangent * (s - s * s))
    }

    fn softplus(self) -> Self {
        Dual::new(self.value.softplus(), self.tangent * self.value.sigmoid())
    }

    fn one_minus_square(self) -> Self {
        Dual::new(
            self.value.one_minus_square(),
            self.tangent * self.value * -2.0,
        )
    }

    fn affine(layer: &Affine<'_>, x: &[Self], with_bias: bool) -> Vec<Self> {
        let values: Vec<T> = x.iter().map(|d| d.value).collect();
        let tangents: Vec<T> = x.iter().map(|d| d.tangent).collect();
        let mut out = T::affine_sets(layer, &[values, tangents], with_bias);
        let t = out.pop().expect("tangent set");
        let v = out.pop().expect("value set");
        v.into_iter().zip(t).map(|(v, t)| Dual::new(v, t)).collect()
    }
}
