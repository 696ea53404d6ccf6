//! Per-axis coordinate contraction between ego space and the bounded
//! parameterized cube `(-1, 1)^3`.
//!
//! Inside the configured region the map is linear with slope `alpha`
//! (normalized by the per-axis half-extent); outside it compresses as
//! `sign(r') * (1 - a / (|r'| + b))`, with `a` and `b` chosen so that value
//! and first derivative are continuous at `|r'| = 1`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Returns `(a, b)` for a contraction fraction `alpha`.
pub fn derive_constants(alpha: f64) -> Result<(f64, f64)> {
    if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
        return Err(Error::InvalidParameter(format!("contraction alpha must lie in (0, 1), got {alpha}")));
    }
    // (1 - alpha)^2 / alpha and (1 - 2 alpha) / alpha, arranged so that
    // alpha = 2/3 gives 1/6 and -1/2 without rounding error
    let inv = 1.0 / alpha;
    let a = alpha * (inv - 1.0) * (inv - 1.0);
    let b = inv - 2.0;
    Ok((a, b))
}

/// Scalar contraction of a normalized coordinate `r' = r / r_b`.
#[inline]
pub fn contract_normalized(r: f64, alpha: f64, a: f64, b: f64) -> f64 {
    let m = r.abs();
    if m <= 1.0 {
        alpha * r
    } else {
        (1.0 - a / (m + b)).copysign(r)
    }
}

/// Derivative of [`contract_normalized`] with respect to `r'`.
#[inline]
pub fn contract_normalized_derivative(r: f64, alpha: f64, a: f64, b: f64) -> f64 {
    let m = r.abs();
    if m <= 1.0 {
        alpha
    } else {
        a / ((m + b) * (m + b))
    }
}

/// Inverse of [`contract_normalized`]. Caller guarantees `|c| < 1`.
#[inline]
pub fn invert_normalized(c: f64, alpha: f64, a: f64, b: f64) -> f64 {
    let m = c.abs();
    if m <= alpha {
        c / alpha
    } else {
        (a / (1.0 - m) - b).copysign(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X = 0,
    Y = 1,
    Z = 2,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Serialized form: `{alpha, inside_min, inside_max, inside_center?}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionConfig {
    pub alpha: f64,
    pub inside_min: [f64; 3],
    pub inside_max: [f64; 3],
    /// Defaults to the midpoint of the inside region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inside_center: Option<[f64; 3]>,
}

/// Validated contraction parameters. `a` and `b` are always derived from
/// `alpha` and never set independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ContractionConfig", into = "ContractionConfig")]
pub struct ContractionParams {
    alpha: f64,
    a: f64,
    b: f64,
    inside_min: Vector3<f64>,
    inside_max: Vector3<f64>,
    inside_center: Vector3<f64>,
    half_extents: Vector3<f64>,
    explicit_center: bool,
}

impl ContractionParams {
    /// Parameters for an inside region `[inside_min, inside_max]`, centered at
    /// its midpoint.
    pub fn new(alpha: f64, inside_min: Vector3<f64>, inside_max: Vector3<f64>) -> Result<Self> {
        Self::build(alpha, inside_min, inside_max, None)
    }

    pub fn with_center(
        alpha: f64,
        inside_min: Vector3<f64>,
        inside_max: Vector3<f64>,
        center: Vector3<f64>,
    ) -> Result<Self> {
        Self::build(alpha, inside_min, inside_max, Some(center))
    }

    fn build(
        alpha: f64,
        inside_min: Vector3<f64>,
        inside_max: Vector3<f64>,
        center: Option<Vector3<f64>>,
    ) -> Result<Self> {
        let (a, b) = derive_constants(alpha)?;
        if alpha == 0.5 {
            log::warn!("contraction alpha = 0.5 gives b = 0; outer branch degenerates to 1 - a/|r'|");
        }
        if inside_min.iter().chain(inside_max.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("inside region bounds"));
        }
        let half_extents = (inside_max - inside_min) * 0.5;
        if half_extents.iter().any(|&h| h <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "inside region must have positive extent on every axis, got min {:?} max {:?}",
                inside_min.as_slice(),
                inside_max.as_slice()
            )));
        }
        if let Some(c) = center {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("inside center"));
            }
        }
        Ok(Self {
            alpha,
            a,
            b,
            inside_min,
            inside_max,
            inside_center: center.unwrap_or((inside_min + inside_max) * 0.5),
            half_extents,
            explicit_center: center.is_some(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn inside_min(&self) -> Vector3<f64> {
        self.inside_min
    }

    pub fn inside_max(&self) -> Vector3<f64> {
        self.inside_max
    }

    pub fn inside_center(&self) -> Vector3<f64> {
        self.inside_center
    }

    /// `(l_x/2, l_y/2, l_z/2)`.
    pub fn half_extents(&self) -> Vector3<f64> {
        self.half_extents
    }

    /// Edge lengths `(l_x, l_y, l_z)` of the inside region.
    pub fn inside_lengths(&self) -> Vector3<f64> {
        self.half_extents * 2.0
    }

    /// Contracts an offset `r` (meters, relative to the inside center).
    pub fn contract_axis(&self, r: f64, axis: Axis) -> f64 {
        let rb = self.half_extents[axis.index()];
        contract_normalized(r / rb, self.alpha, self.a, self.b)
    }

    /// d(contracted)/d(r) in 1/meters.
    pub fn contract_axis_derivative(&self, r: f64, axis: Axis) -> f64 {
        let rb = self.half_extents[axis.index()];
        contract_normalized_derivative(r / rb, self.alpha, self.a, self.b) / rb
    }

    pub fn invert_axis(&self, c: f64, axis: Axis) -> Result<f64> {
        if !c.is_finite() || c.abs() >= 1.0 {
            return Err(Error::OutOfDomain { value: c, domain: "(-1, 1)" });
        }
        let rb = self.half_extents[axis.index()];
        Ok(rb * invert_normalized(c, self.alpha, self.a, self.b))
    }

    /// Ego point to the parameterized cube.
    pub fn contract_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let d = p - self.inside_center;
        Vector3::new(
            self.contract_axis(d.x, Axis::X),
            self.contract_axis(d.y, Axis::Y),
            self.contract_axis(d.z, Axis::Z),
        )
    }

    pub fn invert_point(&self, c: &Vector3<f64>) -> Result<Vector3<f64>> {
        let r = Vector3::new(
            self.invert_axis(c.x, Axis::X)?,
            self.invert_axis(c.y, Axis::Y)?,
            self.invert_axis(c.z, Axis::Z)?,
        );
        Ok(r + self.inside_center)
    }
}

impl TryFrom<ContractionConfig> for ContractionParams {
    type Error = Error;

    fn try_from(cfg: ContractionConfig) -> Result<Self> {
        Self::build(
            cfg.alpha,
            Vector3::from(cfg.inside_min),
            Vector3::from(cfg.inside_max),
            cfg.inside_center.map(Vector3::from),
        )
    }
}

impl From<ContractionParams> for ContractionConfig {
    fn from(p: ContractionParams) -> Self {
        ContractionConfig {
            alpha: p.alpha,
            inside_min: p.inside_min.into(),
            inside_max: p.inside_max.into(),
            inside_center: p.explicit_center.then(|| p.inside_center.into()),
        }
    }
}
