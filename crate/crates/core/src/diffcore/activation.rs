use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Elementwise nonlinearity used by the MLPs and as the opinion saturation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Elu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x >= 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// Derivative at `x`. ReLU uses 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
        }
    }

    /// Derivative expressed through the forward output `y = apply(x)`.
    pub(crate) fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if y >= 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Elu => "elu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            other => Err(format!("unknown activation `{other}` (expected tanh, relu or elu)")),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0, "softplus range is (0, inf)");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturations_vanish_at_origin() {
        for a in [Activation::Tanh, Activation::Relu, Activation::Elu] {
            assert_eq!(a.apply(0.0), 0.0);
        }
    }

    #[test]
    fn relu_and_elu_definitions() {
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
        assert_eq!(Activation::Relu.apply(3.0), 3.0);
        assert!((Activation::Elu.apply(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(Activation::Elu.apply(2.5), 2.5);
    }

    #[test]
    fn tanh_one_matches_series() {
        // tanh(1) = (e^2 - 1)/(e^2 + 1) with e^2 from its Taylor series
        let e2: f64 = (0..40).fold((0.0, 1.0), |(s, term), k| (s + term, term * 2.0 / (k as f64 + 1.0))).0;
        let reference = (e2 - 1.0) / (e2 + 1.0);
        assert!((Activation::Tanh.apply(1.0) - reference).abs() < 1e-14);
        assert!((reference - 0.761_594_155_955_764_9).abs() < 1e-15);
    }

    #[test]
    fn derivative_forms_agree() {
        for a in [Activation::Tanh, Activation::Relu, Activation::Elu] {
            for x in [-2.0, -0.3, 0.4, 1.7] {
                let y = a.apply(x);
                assert!((a.derivative(x) - a.derivative_from_output(y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softplus_roundtrip() {
        for y in [1e-3, 0.5, 1.0, 7.0, 50.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("ReLU".parse::<Activation>().unwrap(), Activation::Relu);
        assert!("gelu".parse::<Activation>().is_err());
    }
}
