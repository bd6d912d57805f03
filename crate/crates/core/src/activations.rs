//! Scalar activation functions with closed-form derivatives up to third order.
//!
//! Derivative propagation through the network needs `f'` and `f''`; pushing
//! parameter gradients back through the second-derivative recursion needs
//! `f'''` as well. Every kind is a total function on finite reals: the
//! ReLU and ELU families take the right-hand limit at the kink, so at `x = 0`
//! they report `f' = 1` and `f'' = f''' = 0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation applied component-wise by every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ActivationKind {
    #[default]
    Softplus,
    Sigmoid,
    Tanh,
    /// Parametric ReLU: `x` for `x > 0`, `slope * x` otherwise.
    Relu { slope: f64 },
    /// Multi-parameter ELU: `x` for `x > 0`, `alpha * (exp(beta * x) - 1)` otherwise.
    Elu { alpha: f64, beta: f64 },
}

/// `f`, `f'`, `f''`, `f'''` evaluated at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivs {
    pub f: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl ActivationKind {
    pub const RELU: ActivationKind = ActivationKind::Relu { slope: 0.0 };
    pub const ELU: ActivationKind = ActivationKind::Elu { alpha: 1.0, beta: 1.0 };

    /// Lowercase name used in configs and checkpoints.
    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Softplus => "softplus",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Relu { .. } => "relu",
            ActivationKind::Elu { .. } => "elu",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ActivationKind::Relu { slope } => slope.is_finite(),
            ActivationKind::Elu { alpha, beta } => alpha.is_finite() && beta.is_finite(),
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("non-finite shape parameter in {self:?}")))
        }
    }

    fn has_default_shape(&self) -> bool {
        match *self {
            ActivationKind::Relu { slope } => slope == 0.0,
            ActivationKind::Elu { alpha, beta } => alpha == 1.0 && beta == 1.0,
            _ => true,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Softplus => softplus(x),
            ActivationKind::Sigmoid => logistic(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Relu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            ActivationKind::Elu { alpha, beta } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * (beta * x).exp_m1()
                }
            }
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        self.derivs(x).d1
    }

    pub fn d2(&self, x: f64) -> f64 {
        self.derivs(x).d2
    }

    pub fn d3(&self, x: f64) -> f64 {
        self.derivs(x).d3
    }

    /// All four values sharing a single exponential where possible.
    pub fn derivs(&self, x: f64) -> Derivs {
        match *self {
            ActivationKind::Softplus => {
                // one exponential serves the value and the logistic pair
                let e = (-x.abs()).exp();
                let d = 1.0 + e;
                let (s, sc) = if x >= 0.0 { (1.0 / d, e / d) } else { (e / d, 1.0 / d) };
                let f = if x > 0.0 { x + e.ln_1p() } else { e.ln_1p() };
                let d2 = s * sc;
                Derivs { f, d1: s, d2, d3: d2 * (sc - s) }
            }
            ActivationKind::Sigmoid => {
                let (s, sc) = logistic_pair(x);
                let d1 = s * sc;
                Derivs { f: s, d1, d2: d1 * (sc - s), d3: d1 * (1.0 - 6.0 * d1) }
            }
            ActivationKind::Tanh => {
                // sech^2 via exp(-2|x|) stays accurate in the tails.
                let e = (-2.0 * x.abs()).exp();
                let sech2 = 4.0 * e / ((1.0 + e) * (1.0 + e));
                let t = x.tanh();
                Derivs {
                    f: t,
                    d1: sech2,
                    d2: -2.0 * t * sech2,
                    d3: sech2 * (4.0 - 6.0 * sech2),
                }
            }
            ActivationKind::Relu { slope } => {
                if x >= 0.0 {
                    Derivs { f: x, d1: 1.0, d2: 0.0, d3: 0.0 }
                } else {
                    Derivs { f: slope * x, d1: slope, d2: 0.0, d3: 0.0 }
                }
            }
            ActivationKind::Elu { alpha, beta } => {
                if x >= 0.0 {
                    Derivs { f: x, d1: 1.0, d2: 0.0, d3: 0.0 }
                } else {
                    let e = (beta * x).exp();
                    let d1 = alpha * beta * e;
                    Derivs {
                        f: alpha * (beta * x).exp_m1(),
                        d1,
                        d2: d1 * beta,
                        d3: d1 * beta * beta,
                    }
                }
            }
        }
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    logistic_pair(x).0
}

/// `(sigma(x), sigma(-x))`, each computed without cancellation.
fn logistic_pair(x: f64) -> (f64, f64) {
    if x >= 0.0 {
        let e = (-x).exp();
        let d = 1.0 + e;
        (1.0 / d, e / d)
    } else {
        let e = x.exp();
        let d = 1.0 + e;
        (e / d, 1.0 / d)
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus" => Ok(ActivationKind::Softplus),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "tanh" => Ok(ActivationKind::Tanh),
            "relu" => Ok(ActivationKind::RELU),
            "elu" => Ok(ActivationKind::ELU),
            other => Err(Error::Config(format!(
                "unknown activation {other:?} (expected softplus, sigmoid, tanh, relu or elu)"
            ))),
        }
    }
}

// Default shapes serialize as the bare name; non-default shapes carry their
// parameters so checkpoints round-trip exactly.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Repr {
    Name(String),
    Shaped {
        kind: String,
        #[serde(default)]
        slope: Option<f64>,
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default)]
        beta: Option<f64>,
    },
}

impl Serialize for ActivationKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = if self.has_default_shape() {
            Repr::Name(self.name().to_string())
        } else {
            match *self {
                ActivationKind::Relu { slope } => Repr::Shaped {
                    kind: "relu".into(),
                    slope: Some(slope),
                    alpha: None,
                    beta: None,
                },
                ActivationKind::Elu { alpha, beta } => Repr::Shaped {
                    kind: "elu".into(),
                    slope: None,
                    alpha: Some(alpha),
                    beta: Some(beta),
                },
                _ => unreachable!(),
            }
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ActivationKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let kind = match Repr::deserialize(d)? {
            Repr::Name(name) => name.parse().map_err(D::Error::custom)?,
            Repr::Shaped { kind, slope, alpha, beta } => match kind.parse().map_err(D::Error::custom)? {
                ActivationKind::Relu { .. } => ActivationKind::Relu { slope: slope.unwrap_or(0.0) },
                ActivationKind::Elu { .. } => ActivationKind::Elu {
                    alpha: alpha.unwrap_or(1.0),
                    beta: beta.unwrap_or(1.0),
                },
                other => other,
            },
        };
        kind.validate().map_err(D::Error::custom)?;
        Ok(kind)
    }
}
