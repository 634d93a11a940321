use serde::{Deserialize, Serialize};

/// Base activation `f0` shared by every node of a layer before scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Relu => {
                if u > 0.0 {
                    u
                } else {
                    0.0
                }
            }
            Activation::Linear => u,
            Activation::Tanh => u.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-u).exp()),
        }
    }

    /// `f0'(u)`; the ReLU derivative at `u = 0` is taken as 0.
    #[inline]
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Tanh => {
                let t = u.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let y = 1.0 / (1.0 + (-u).exp());
                y * (1.0 - y)
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Linear => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Relu,
            1 => Activation::Linear,
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            _ => return None,
        })
    }
}

/// Node-wise variant activation `s * f0(u)`.
#[inline]
pub fn scaled_activation(u: f64, s: f64, base: Activation) -> f64 {
    s * base.apply(u)
}

/// Derivative of [`scaled_activation`] with respect to `u`.
#[inline]
pub fn scaled_derivative(u: f64, s: f64, base: Activation) -> f64 {
    s * base.derivative(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_examples() {
        assert_eq!(scaled_activation(2.0, 0.5, Activation::Relu), 1.0);
        assert_eq!(scaled_activation(-3.0, 0.7, Activation::Relu), 0.0);
        assert_eq!(
            scaled_activation(2.0, 1.0, Activation::Relu),
            Activation::Relu.apply(2.0)
        );
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for act in [
            Activation::Relu,
            Activation::Linear,
            Activation::Tanh,
            Activation::Sigmoid,
        ] {
            for &u in &[-2.0, -0.3, 0.4, 1.7] {
                let h = 1e-6;
                let fd = (act.apply(u + h) - act.apply(u - h)) / (2.0 * h);
                assert!((fd - act.derivative(u)).abs() < 1e-8, "{act:?} at {u}");
            }
        }
    }

    proptest! {
        // Slopes are non-negative and non-increasing along an ordered profile.
        #[test]
        fn slope_conditions(u in -10.0f64..10.0, a in 0.0f64..1.0, b in 0.0f64..1.0, which in 0usize..2) {
            let base = [Activation::Relu, Activation::Linear][which];
            let (hi, lo) = if a >= b { (a.max(1e-9), b.max(1e-9)) } else { (b.max(1e-9), a.max(1e-9)) };
            let d_hi = scaled_derivative(u, hi, base);
            let d_lo = scaled_derivative(u, lo, base);
            prop_assert!(d_lo >= 0.0);
            prop_assert!(d_hi >= d_lo);
        }
    }
}
