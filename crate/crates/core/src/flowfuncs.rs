//! Demand and supply function families.
//!
//! A demand function bounds the outflow of a cell by its mass; it is
//! nondecreasing, concave, and vanishes at zero. A supply function bounds the
//! inflow a cell can accept; it is nonincreasing and concave.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowFuncError {
    #[error("negative mass {0}")]
    NegativeMass(f64),
    #[error("flow {flow} is at or above capacity {capacity}")]
    AtOrAboveCapacity { flow: f64, capacity: f64 },
    #[error("flow {0} cannot be inverted")]
    NotInvertible(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn positive(name: &str, v: f64) -> Result<(), FlowFuncError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(FlowFuncError::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
    }
}

fn check_mass(x: f64) -> Result<(), FlowFuncError> {
    if x >= 0.0 {
        Ok(())
    } else {
        Err(FlowFuncError::NegativeMass(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Demand {
    /// `a x`, unbounded.
    Linear { a: f64 },
    /// `C (1 - exp(-lambda x))`.
    SaturatingExp {
        #[serde(rename = "C")]
        capacity: f64,
        lambda: f64,
    },
    /// `min(a x, C)`.
    PiecewiseLinearCap {
        a: f64,
        #[serde(rename = "C")]
        capacity: f64,
    },
}

impl Demand {
    pub fn linear(a: f64) -> Result<Self, FlowFuncError> {
        positive("a", a)?;
        Ok(Demand::Linear { a })
    }

    pub fn saturating_exp(capacity: f64, lambda: f64) -> Result<Self, FlowFuncError> {
        positive("C", capacity)?;
        positive("lambda", lambda)?;
        Ok(Demand::SaturatingExp { capacity, lambda })
    }

    pub fn piecewise_linear_cap(a: f64, capacity: f64) -> Result<Self, FlowFuncError> {
        positive("a", a)?;
        positive("C", capacity)?;
        Ok(Demand::PiecewiseLinearCap { a, capacity })
    }

    pub fn validate(&self) -> Result<(), FlowFuncError> {
        match *self {
            Demand::Linear { a } => Self::linear(a).map(drop),
            Demand::SaturatingExp { capacity, lambda } => Self::saturating_exp(capacity, lambda).map(drop),
            Demand::PiecewiseLinearCap { a, capacity } => Self::piecewise_linear_cap(a, capacity).map(drop),
        }
    }

    pub fn eval(&self, x: f64) -> Result<f64, FlowFuncError> {
        check_mass(x)?;
        Ok(self.value(x))
    }

    /// Evaluation without the sign check. Negative mass is treated as zero.
    pub(crate) fn value(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        match *self {
            Demand::Linear { a } => a * x,
            Demand::SaturatingExp { capacity, lambda } => -capacity * (-lambda * x).exp_m1(),
            Demand::PiecewiseLinearCap { a, capacity } => (a * x).min(capacity),
        }
    }

    /// Flow capacity `sup φ`; infinite only for [`Demand::Linear`].
    pub fn capacity(&self) -> f64 {
        match *self {
            Demand::Linear { .. } => f64::INFINITY,
            Demand::SaturatingExp { capacity, .. } | Demand::PiecewiseLinearCap { capacity, .. } => capacity,
        }
    }

    /// Largest slope, i.e. the Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Demand::Linear { a } | Demand::PiecewiseLinearCap { a, .. } => a,
            Demand::SaturatingExp { capacity, lambda } => capacity * lambda,
        }
    }

    /// Mass at which the derivative is discontinuous, if any.
    pub fn kink(&self) -> Option<f64> {
        match *self {
            Demand::PiecewiseLinearCap { a, capacity } => Some(capacity / a),
            _ => None,
        }
    }

    /// Mass `x` with `φ(x) = z`, for `0 <= z < C`.
    pub fn inverse(&self, z: f64) -> Result<f64, FlowFuncError> {
        if !(z >= 0.0) || !z.is_finite() {
            return Err(FlowFuncError::NotInvertible(z));
        }
        let capacity = self.capacity();
        if z >= capacity {
            return Err(FlowFuncError::AtOrAboveCapacity { flow: z, capacity });
        }
        Ok(match *self {
            Demand::Linear { a } => z / a,
            Demand::SaturatingExp { capacity, lambda } => -(-z / capacity).ln_1p() / lambda,
            Demand::PiecewiseLinearCap { a, .. } => z / a,
        })
    }

    /// The same family scaled by `s`, i.e. `s φ`.
    pub fn scaled(&self, s: f64) -> Self {
        match *self {
            Demand::Linear { a } => Demand::Linear { a: s * a },
            Demand::SaturatingExp { capacity, lambda } => Demand::SaturatingExp { capacity: s * capacity, lambda },
            Demand::PiecewiseLinearCap { a, capacity } => Demand::PiecewiseLinearCap { a: s * a, capacity: s * capacity },
        }
    }
}

/// Solves `f(x) = z` for nondecreasing `f` with `f(0) <= z` by doubling an
/// upper bracket and bisecting. Returns `None` if no bracket is found below
/// `x_max`.
pub fn invert_by_bisection(f: impl Fn(f64) -> f64, z: f64, x_max: f64) -> Option<f64> {
    let tol = |x: f64| 1e-10 * (1.0 + x.abs());
    if f(0.0) >= z {
        return Some(0.0);
    }
    let mut hi = 1.0;
    while f(hi) < z {
        hi *= 2.0;
        if hi > x_max {
            return None;
        }
    }
    let mut lo = 0.0;
    while hi - lo > tol(hi) {
        let mid = 0.5 * (lo + hi);
        if f(mid) < z {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Supply {
    Constant { s: f64 },
    /// `max(s - b x, 0)`.
    AffineDecreasing { s: f64, b: f64 },
    /// No supply constraint.
    Unlimited,
}

impl Supply {
    pub fn constant(s: f64) -> Result<Self, FlowFuncError> {
        positive("s", s)?;
        Ok(Supply::Constant { s })
    }

    pub fn affine_decreasing(s: f64, b: f64) -> Result<Self, FlowFuncError> {
        positive("s", s)?;
        positive("b", b)?;
        Ok(Supply::AffineDecreasing { s, b })
    }

    pub fn validate(&self) -> Result<(), FlowFuncError> {
        match *self {
            Supply::Constant { s } => Self::constant(s).map(drop),
            Supply::AffineDecreasing { s, b } => Self::affine_decreasing(s, b).map(drop),
            Supply::Unlimited => Ok(()),
        }
    }

    pub fn eval(&self, x: f64) -> Result<f64, FlowFuncError> {
        check_mass(x)?;
        Ok(self.value(x))
    }

    pub(crate) fn value(&self, x: f64) -> f64 {
        match *self {
            Supply::Constant { s } => s,
            Supply::AffineDecreasing { s, b } => (s - b * x.max(0.0)).max(0.0),
            Supply::Unlimited => f64::INFINITY,
        }
    }

    /// `sup { x : σ(x) > 0 }`.
    pub fn buffer_capacity(&self) -> f64 {
        match *self {
            Supply::AffineDecreasing { s, b } => s / b,
            Supply::Constant { .. } | Supply::Unlimited => f64::INFINITY,
        }
    }

    pub fn kink(&self) -> Option<f64> {
        match *self {
            Supply::AffineDecreasing { s, b } => Some(s / b),
            _ => None,
        }
    }
}
