//! Marginal mean/variance model for clustered responses.
//!
//! Each response `y_ij` has mean `mu(x_ij' beta)` and variance
//! `phi * mu'(x_ij' beta)`. Only the canonical logit link ships; `Family` is an
//! enumeration so further canonical links slot in without changing callers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Linear predictors are clamped to this magnitude before exponentiation.
pub const ETA_CLAMP: f64 = 30.0;

/// One longitudinal unit: `m` repeated responses, an `m x d` covariate matrix
/// and the survey design weight of the unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRecord {
    pub id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub weight: f64,
}

impl ClusterRecord {
    pub fn new(id: impl Into<String>, y: DVector<f64>, x: DMatrix<f64>, weight: f64) -> Result<Self> {
        let rec = Self {
            id: id.into(),
            y,
            x,
            weight,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.y.len();
        if m == 0 {
            return Err(Error::Contract(format!("cluster {} has no occasions", self.id)));
        }
        if self.x.nrows() != m {
            return Err(Error::Dimension(format!(
                "cluster {}: {} responses but {} covariate rows",
                self.id,
                m,
                self.x.nrows()
            )));
        }
        if self.x.iter().any(|v| !v.is_finite()) || self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("cluster {} has non-finite data", self.id)));
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(Error::Contract(format!(
                "cluster {} has non-positive weight {}",
                self.id, self.weight
            )));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Restrict the covariate matrix to the given columns, in order.
    pub fn select_covariates(&self, columns: &[usize]) -> Self {
        let x = DMatrix::from_fn(self.x.nrows(), columns.len(), |j, c| self.x[(j, columns[c])]);
        Self {
            id: self.id.clone(),
            y: self.y.clone(),
            x,
            weight: self.weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Family {
    #[default]
    BernoulliLogit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalModel {
    pub family: Family,
    pub dispersion: f64,
}

impl Default for MarginalModel {
    fn default() -> Self {
        Self::bernoulli_logit()
    }
}

impl MarginalModel {
    pub fn bernoulli_logit() -> Self {
        Self {
            family: Family::BernoulliLogit,
            dispersion: 1.0,
        }
    }

    /// Checks that every response is admissible for the family.
    pub fn check_response(&self, rec: &ClusterRecord) -> Result<()> {
        match self.family {
            Family::BernoulliLogit => {
                if let Some(v) = rec.y.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Contract(format!(
                        "cluster {}: response {} is not binary",
                        rec.id, v
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn mean(&self, eta: f64) -> f64 {
        match self.family {
            Family::BernoulliLogit => link_inverse(eta),
        }
    }

    /// `sigma^2(theta) = mu'(theta)`, without the dispersion factor.
    #[inline]
    pub fn variance_fn(&self, mu: f64) -> f64 {
        match self.family {
            Family::BernoulliLogit => mu * (1.0 - mu),
        }
    }

    /// Derivative of `mu'` with respect to the linear predictor, expressed via `mu`.
    #[inline]
    pub fn variance_slope(&self, mu: f64) -> f64 {
        match self.family {
            Family::BernoulliLogit => mu * (1.0 - mu) * (1.0 - 2.0 * mu),
        }
    }
}

/// Logistic inverse link `1 / (1 + exp(-eta))`, clamped so the result stays in (0, 1).
#[inline]
pub fn link_inverse(eta: f64) -> f64 {
    let eta = eta.clamp(-ETA_CLAMP, ETA_CLAMP);
    1.0 / (1.0 + (-eta).exp())
}

/// Mean vector, variance diagonal and Jacobian of one cluster at `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterEvaluation {
    pub mu: DVector<f64>,
    pub a_diag: DVector<f64>,
    pub jac: DMatrix<f64>,
}

pub fn evaluate_cluster(
    rec: &ClusterRecord,
    beta: &DVector<f64>,
    model: &MarginalModel,
) -> Result<ClusterEvaluation> {
    if beta.len() != rec.dim() {
        return Err(Error::Dimension(format!(
            "beta has length {} but cluster {} has {} covariates",
            beta.len(),
            rec.id,
            rec.dim()
        )));
    }
    let eta = &rec.x * beta;
    let mu = eta.map(|e| model.mean(e));
    let sigma2 = mu.map(|u| model.variance_fn(u));
    let a_diag = &sigma2 * model.dispersion;
    let mut jac = rec.x.clone();
    for (j, mut row) in jac.row_iter_mut().enumerate() {
        row *= sigma2[j];
    }
    Ok(ClusterEvaluation { mu, a_diag, jac })
}
