//! Scalar activations.
//!
//! The smoothed ReLU is the only activation the certificates accept. It is
//! `C¹`, non-decreasing and convex, its derivative lies in `[0, 1]` and is
//! `1/(2γ)`-Lipschitz, so it satisfies every activation hypothesis needed for
//! the denoiser to be a monotone Lipschitz gradient.
//!
//! ```text
//!            ⎧ x                          x > γ
//! sReLU(x) = ⎨ x²/(4γ) + x/2 + γ/4        |x| ≤ γ
//!            ⎩ 0                          x < −γ
//! ```

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    /// Smoothed ReLU with quadratic transition of half-width `gamma`.
    SRelu,
    /// `σ(x) = x`. Only meant for oracle tests; never certifiable.
    Linear,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::SRelu => "srelu",
            ActivationKind::Linear => "linear",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "srelu" => Some(ActivationKind::SRelu),
            "linear" => Some(ActivationKind::Linear),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationSpec {
    kind: ActivationKind,
    gamma: f64,
}

impl ActivationSpec {
    pub fn srelu(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Invalid(format!(
                "sReLU half-width must be positive and finite, got {gamma}"
            )));
        }
        Ok(ActivationSpec {
            kind: ActivationKind::SRelu,
            gamma,
        })
    }

    /// Identity activation for tests. `gamma` is carried only so the
    /// serialized form is uniform.
    pub fn linear() -> Self {
        ActivationSpec {
            kind: ActivationKind::Linear,
            gamma: 1.0,
        }
    }

    pub fn new(kind: ActivationKind, gamma: f64) -> Result<Self> {
        match kind {
            ActivationKind::SRelu => Self::srelu(gamma),
            ActivationKind::Linear => Ok(ActivationSpec { kind, gamma }),
        }
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_certifiable(&self) -> bool {
        self.kind == ActivationKind::SRelu
    }

    /// `σ(x)`.
    pub fn eval(&self, x: f64) -> Result<f64> {
        finite(x)?;
        Ok(self.value(x))
    }

    /// `σ'(x)`.
    pub fn derivative(&self, x: f64) -> Result<f64> {
        finite(x)?;
        Ok(self.slope(x))
    }

    /// `σ''(x)`. Points exactly at `|x| = γ` take the interior value.
    pub fn second_derivative(&self, x: f64) -> Result<f64> {
        finite(x)?;
        Ok(self.curvature(x))
    }

    // Unchecked kernels for the vectorised paths, which validate their
    // inputs once up front.

    #[inline]
    pub(crate) fn value(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Linear => x,
            ActivationKind::SRelu => {
                let g = self.gamma;
                if x > g {
                    x
                } else if x >= -g {
                    x * x / (4.0 * g) + 0.5 * x + 0.25 * g
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    pub(crate) fn slope(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Linear => 1.0,
            ActivationKind::SRelu => {
                let g = self.gamma;
                if x > g {
                    1.0
                } else if x >= -g {
                    x / (2.0 * g) + 0.5
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    pub(crate) fn curvature(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Linear => 0.0,
            ActivationKind::SRelu => {
                let g = self.gamma;
                if x.abs() <= g {
                    1.0 / (2.0 * g)
                } else {
                    0.0
                }
            }
        }
    }
}

fn finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            context: "non-finite activation input",
        })
    }
}
