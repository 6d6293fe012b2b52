use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive definite matrix, or a `Singular` error.
pub(crate) fn cholesky(a: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let cond = diag_condition(&a);
    Cholesky::new(a).ok_or_else(|| Error::Singular {
        what: what.to_string(),
        condition: cond,
    })
}

/// Solve `a x = b` for symmetric `a`, Cholesky first and LU as fallback for
/// indefinite but nonsingular systems.
pub(crate) fn solve_symmetric(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if let Some(ch) = Cholesky::new(a.clone()) {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    a.clone()
        .lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular {
            what: what.to_string(),
            condition: diag_condition(a),
        })
}

pub(crate) fn inverse_symmetric(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let inv = match Cholesky::new(a.clone()) {
        Some(ch) => ch.inverse(),
        None => a.clone().try_inverse().ok_or_else(|| Error::Singular {
            what: what.to_string(),
            condition: diag_condition(a),
        })?,
    };
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular {
            what: what.to_string(),
            condition: diag_condition(a),
        });
    }
    debug_assert_eq!(inv.nrows(), n);
    Ok(inv)
}

/// Condition number from the symmetric eigenvalues (for diagnostics only).
pub(crate) fn diag_condition(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() || a.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let sym = (a + a.transpose()) * 0.5;
    let ev = sym.symmetric_eigen().eigenvalues;
    let max = ev.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub(crate) fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}
