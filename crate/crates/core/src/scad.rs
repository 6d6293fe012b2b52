//! Smoothly clipped absolute deviation (SCAD) penalty.
//!
//! `p_lambda` is a quadratic spline with knots at `lambda` and `a * lambda`:
//! linear near the origin, concave in between and flat beyond `a * lambda`.

use crate::error::{Error, Result};

pub const DEFAULT_A: f64 = 3.7;
pub const DEFAULT_ZERO_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySpec {
    pub lambda: f64,
    pub a: f64,
    /// Coefficients below this magnitude are set to zero during LQA iterations.
    pub zero_threshold: f64,
}

impl Default for PenaltySpec {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            a: DEFAULT_A,
            zero_threshold: DEFAULT_ZERO_THRESHOLD,
        }
    }
}

impl PenaltySpec {
    pub fn new(lambda: f64, a: f64, zero_threshold: f64) -> Result<Self> {
        let spec = Self {
            lambda,
            a,
            zero_threshold,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_lambda(lambda: f64) -> Result<Self> {
        Self::new(lambda, DEFAULT_A, DEFAULT_ZERO_THRESHOLD)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 2.0) || !self.a.is_finite() {
            return Err(Error::InvalidParameter(format!("SCAD requires a > 2, got {}", self.a)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda must be a finite nonnegative number, got {}",
                self.lambda
            )));
        }
        if !(self.zero_threshold > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "zero threshold must be positive, got {}",
                self.zero_threshold
            )));
        }
        Ok(())
    }

    pub fn at(&self, lambda: f64) -> Self {
        Self { lambda, ..*self }
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if theta >= 0.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!("SCAD argument must be nonnegative, got {theta}")))
    }
}

pub fn scad_value(theta: f64, spec: &PenaltySpec) -> Result<f64> {
    check_theta(theta)?;
    let (l, a) = (spec.lambda, spec.a);
    Ok(if theta <= l {
        l * theta
    } else if theta <= a * l {
        -(theta * theta - 2.0 * a * l * theta + l * l) / (2.0 * (a - 1.0))
    } else {
        (a + 1.0) * l * l / 2.0
    })
}

pub fn scad_derivative(theta: f64, spec: &PenaltySpec) -> Result<f64> {
    check_theta(theta)?;
    let (l, a) = (spec.lambda, spec.a);
    Ok(if theta <= l {
        l
    } else {
        (a * l - theta).max(0.0) / (a - 1.0)
    })
}

/// Second derivative; `-1/(a-1)` strictly inside the middle branch, zero elsewhere
/// (including exactly at the knots).
pub fn scad_second_derivative(theta: f64, spec: &PenaltySpec) -> Result<f64> {
    check_theta(theta)?;
    let (l, a) = (spec.lambda, spec.a);
    Ok(if theta > l && theta < a * l {
        -1.0 / (spec.a - 1.0)
    } else {
        0.0
    })
}

/// Sum of `p_lambda(|beta_k|)` over all coordinates.
pub fn scad_total(beta: &[f64], spec: &PenaltySpec) -> f64 {
    beta.iter()
        .map(|b| scad_value(b.abs(), spec).expect("absolute value is nonnegative"))
        .sum()
}

/// Diagonal of the LQA matrix `p'(|b|)/|b|` for already-pruned active coefficients.
pub fn lqa_weights(beta_active: &[f64], spec: &PenaltySpec) -> Result<Vec<f64>> {
    beta_active
        .iter()
        .map(|&b| {
            let t = b.abs();
            if t < spec.zero_threshold {
                return Err(Error::Contract(format!(
                    "coefficient {b} is below the zero threshold {}; prune it first",
                    spec.zero_threshold
                )));
            }
            Ok(scad_derivative(t, spec)? / t)
        })
        .collect()
}
