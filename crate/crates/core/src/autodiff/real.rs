use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tape::{sigmoid, softplus, Matrix, Var};

/// Scalar-like arithmetic shared by plain `f64` and tape nodes, so
/// element-wise formulas are written once and either evaluated directly or
/// recorded for differentiation.
pub trait Real:
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
    /// A constant with the same "home" as `self` (same tape for nodes).
    fn lift(&self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sinh(self) -> Self;
    fn cosh(self) -> Self;
    fn asinh(self) -> Self;
    fn softplus(self) -> Self;
    fn sigmoid(self) -> Self;
    fn sqrt(self) -> Self;
    fn square(self) -> Self;
    fn abs(self) -> Self;
    fn recip(self) -> Self;
    /// Sign of the value, carrying no derivative.
    fn sign(self) -> Self;
    /// Primal value of the first element.
    fn primal(&self) -> f64;
}

impl Real for f64 {
    fn lift(&self, c: f64) -> Self {
        c
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sinh(self) -> Self {
        f64::sinh(self)
    }
    fn cosh(self) -> Self {
        f64::cosh(self)
    }
    fn asinh(self) -> Self {
        f64::asinh(self)
    }
    fn softplus(self) -> Self {
        softplus(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn square(self) -> Self {
        self * self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn recip(self) -> Self {
        1.0 / self
    }
    fn sign(self) -> Self {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
    fn primal(&self) -> f64 {
        *self
    }
}

impl<'t> Real for Var<'t> {
    fn lift(&self, c: f64) -> Self {
        self.constant(Matrix::from_element(1, 1, c))
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn sinh(self) -> Self {
        Var::sinh(self)
    }
    fn cosh(self) -> Self {
        Var::cosh(self)
    }
    fn asinh(self) -> Self {
        Var::asinh(self)
    }
    fn softplus(self) -> Self {
        Var::softplus(self)
    }
    fn sigmoid(self) -> Self {
        Var::sigmoid(self)
    }
    fn sqrt(self) -> Self {
        Var::sqrt(self)
    }
    fn square(self) -> Self {
        Var::square(self)
    }
    fn abs(self) -> Self {
        Var::abs(self)
    }
    fn recip(self) -> Self {
        Var::recip(self)
    }
    fn sign(self) -> Self {
        let s = self.value().map(|x| x.sign());
        self.constant(s)
    }
    fn primal(&self) -> f64 {
        self.value()[(0, 0)]
    }
}
