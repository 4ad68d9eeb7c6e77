// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pointwise nonlinearities written as `f(x) = x · φ(x)`.

use serde::{Deserialize, Serialize};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const TANH_CUBIC: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    /// `φ` is the standard normal CDF.
    #[default]
    GeluErf,
    /// `φ(x) = ½(1 + tanh(√(2/π)(x + 0.044715 x³)))`.
    GeluTanh,
    /// `φ` is the logistic sigmoid.
    Swish,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::GeluErf => "gelu_erf",
            ActivationKind::GeluTanh => "gelu_tanh",
            ActivationKind::Swish => "swish",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu_erf" | "gelu" => Some(ActivationKind::GeluErf),
            "gelu_tanh" => Some(ActivationKind::GeluTanh),
            "swish" | "silu" => Some(ActivationKind::Swish),
            _ => None,
        }
    }

    /// Gate value `φ(x)`, always in `[0, 1]`.
    pub fn gate(self, x: f64) -> f64 {
        match self {
            ActivationKind::GeluErf => 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            ActivationKind::GeluTanh => {
                0.5 * (1.0 + (SQRT_2_OVER_PI * (x + TANH_CUBIC * x * x * x)).tanh())
            }
            ActivationKind::Swish => sigmoid(x),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        x * self.gate(x)
    }

    /// `φ'(x)`.
    pub fn gate_derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::GeluErf => {
                (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
            }
            ActivationKind::GeluTanh => {
                let u = SQRT_2_OVER_PI * (x + TANH_CUBIC * x * x * x);
                let th = u.tanh();
                0.5 * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * TANH_CUBIC * x * x)
            }
            ActivationKind::Swish => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    /// `f'(x) = φ(x) + x φ'(x)`.
    pub fn derivative(self, x: f64) -> f64 {
        self.gate(x) + x * self.gate_derivative(x)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
