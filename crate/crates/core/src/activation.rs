//! Pointwise activation functions and their derivatives.

use serde::{Deserialize, Serialize};

pub const SELU_LAMBDA: f64 = 1.0507009873554804934193349852946;
pub const SELU_ALPHA: f64 = 1.6732632423543772848170429916717;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Selu,
    Tanh,
    Sigmoid,
    /// Heaviside step: 1 for x >= 0, else 0. Its backward pass uses the
    /// rectangular window of the surrogate gradient.
    Threshold,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Threshold => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative expressed in terms of the input x and the output y = eval(x).
    /// For Threshold this is the rectangular window of half-width `mu`.
    #[inline]
    pub fn deriv(self, x: f64, y: f64, mu: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    // y = lambda*alpha*(e^x - 1)  =>  dy/dx = y + lambda*alpha
                    y + SELU_LAMBDA * SELU_ALPHA
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Threshold => rect_window(x, mu),
        }
    }
}

/// Rectangular pseudo-derivative window: 1 inside |x| < mu, else 0.
#[inline]
pub fn rect_window(x: f64, mu: f64) -> f64 {
    if x.abs() < mu {
        1.0
    } else {
        0.0
    }
}
