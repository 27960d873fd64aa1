//! Sparsity-promoting penalty functions applied elementwise to filter
//! responses, with analytically exact first and second derivatives.
//!
//! Three shapes are supported: a smoothed absolute value, the smooth
//! non-convex `log(1 + z²)` (Student-t flavor), and a smoothed log-absolute
//! `log(1 - eps + sqrt(z² + eps²))`. The non-convex ones have `d2 < 0` away
//! from the origin; downstream code must not assume positive curvature.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyKind {
    /// `sqrt(z² + eps²)`, the smoothed absolute value.
    SmoothedAbs,
    /// `log(1 + z²)`.
    LogSquare,
    /// `log(1 - eps + sqrt(z² + eps²))`, the smoothed `log(1 + |z|)`.
    LogSmoothedAbs,
}

/// Penalty shape plus its smoothing parameter. `epsilon` is a fixed model
/// parameter (serialized with trained models), never trainable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub kind: PenaltyKind,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-2;

impl Penalty {
    pub fn new(kind: PenaltyKind, epsilon: f64) -> Result<Self> {
        match kind {
            PenaltyKind::SmoothedAbs | PenaltyKind::LogSmoothedAbs if epsilon <= 0.0 => {
                Err(Error::InvalidParameter(format!(
                    "penalty epsilon must be positive, got {epsilon}"
                )))
            }
            _ => Ok(Self { kind, epsilon }),
        }
    }

    pub fn smoothed_abs() -> Self {
        Self { kind: PenaltyKind::SmoothedAbs, epsilon: DEFAULT_EPSILON }
    }

    pub fn log_square() -> Self {
        Self { kind: PenaltyKind::LogSquare, epsilon: DEFAULT_EPSILON }
    }

    pub fn log_smoothed_abs() -> Self {
        Self { kind: PenaltyKind::LogSmoothedAbs, epsilon: DEFAULT_EPSILON }
    }

    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        let e = self.epsilon;
        match self.kind {
            PenaltyKind::SmoothedAbs => (z * z + e * e).sqrt(),
            PenaltyKind::LogSquare => (1.0 + z * z).ln(),
            PenaltyKind::LogSmoothedAbs => (1.0 - e + (z * z + e * e).sqrt()).ln(),
        }
    }

    #[inline]
    pub fn d1(&self, z: f64) -> f64 {
        let e = self.epsilon;
        match self.kind {
            PenaltyKind::SmoothedAbs => z / (z * z + e * e).sqrt(),
            PenaltyKind::LogSquare => 2.0 * z / (1.0 + z * z),
            PenaltyKind::LogSmoothedAbs => {
                let s = (z * z + e * e).sqrt();
                z / (s * (1.0 - e + s))
            }
        }
    }

    #[inline]
    pub fn d2(&self, z: f64) -> f64 {
        let e = self.epsilon;
        match self.kind {
            PenaltyKind::SmoothedAbs => {
                let t = z * z + e * e;
                e * e / (t * t.sqrt())
            }
            PenaltyKind::LogSquare => {
                let t = 1.0 + z * z;
                2.0 * (1.0 - z * z) / (t * t)
            }
            PenaltyKind::LogSmoothedAbs => {
                let t = z * z + e * e;
                let s = t.sqrt();
                let u = 1.0 - e + s;
                (e * e * (1.0 - e) + (e * e - z * z) * s) / (t * s * u * u)
            }
        }
    }
}
