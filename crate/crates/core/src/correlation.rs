//! Working correlation structures and the basis matrices spanning their inverses.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorrelationKind {
    Independence,
    Exchangeable,
    Ar1,
}

impl CorrelationKind {
    pub fn label(self) -> &'static str {
        match self {
            CorrelationKind::Independence => "independence",
            CorrelationKind::Exchangeable => "exchangeable",
            CorrelationKind::Ar1 => "ar1",
        }
    }

    /// Short column label used in report tables.
    pub fn short_label(self) -> &'static str {
        match self {
            CorrelationKind::Independence => "IND",
            CorrelationKind::Exchangeable => "EX",
            CorrelationKind::Ar1 => "AR1",
        }
    }
}

impl fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CorrelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "independence" | "ind" => Ok(CorrelationKind::Independence),
            "exchangeable" | "ex" => Ok(CorrelationKind::Exchangeable),
            "ar1" | "ar(1)" => Ok(CorrelationKind::Ar1),
            other => Err(Error::InvalidParameter(format!(
                "unsupported correlation structure `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrelationStructure {
    pub kind: CorrelationKind,
    pub m: usize,
}

impl CorrelationStructure {
    pub fn new(kind: CorrelationKind, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParameter("cluster size must be at least 1".into()));
        }
        Ok(Self { kind, m })
    }
}

/// Ordered basis `M_1 .. M_L` with `M_1 = I`. The order fixes the block layout
/// of stacked extended quasi-scores.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub bases: Vec<DMatrix<f64>>,
}

impl BasisSet {
    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    /// Cluster size the bases are built for.
    pub fn m(&self) -> usize {
        self.bases.first().map_or(0, |b| b.nrows())
    }
}

pub fn basis_matrices(structure: CorrelationStructure) -> BasisSet {
    let m = structure.m;
    let identity = DMatrix::<f64>::identity(m, m);
    let bases = match structure.kind {
        CorrelationKind::Independence => vec![identity],
        CorrelationKind::Exchangeable => {
            let off = DMatrix::from_fn(m, m, |l, r| if l != r { 1.0 } else { 0.0 });
            vec![identity, off]
        }
        CorrelationKind::Ar1 => {
            // symmetric tridiagonal form of the first off-diagonal basis
            let band = DMatrix::from_fn(m, m, |l, r| if l.abs_diff(r) == 1 { 1.0 } else { 0.0 });
            let corners = DMatrix::from_fn(m, m, |l, r| {
                if l == r && (l == 0 || l == m - 1) {
                    1.0
                } else {
                    0.0
                }
            });
            vec![identity, band, corners]
        }
    };
    BasisSet { bases }
}

pub fn working_correlation(structure: CorrelationStructure, alpha: f64) -> Result<DMatrix<f64>> {
    let m = structure.m;
    match structure.kind {
        CorrelationKind::Independence => Ok(DMatrix::identity(m, m)),
        kind => {
            if !(0.0..1.0).contains(&alpha) {
                return Err(Error::InvalidParameter(format!(
                    "correlation parameter {alpha} outside [0, 1)"
                )));
            }
            Ok(DMatrix::from_fn(m, m, |l, r| {
                if l == r {
                    1.0
                } else if kind == CorrelationKind::Exchangeable {
                    alpha
                } else {
                    alpha.powi(l.abs_diff(r) as i32)
                }
            }))
        }
    }
}

/// Frobenius residual of the least-squares projection of `R(alpha)^{-1}` onto
/// the span of the structure's basis matrices.
pub fn span_check(structure: CorrelationStructure, alpha: f64) -> Result<f64> {
    let r = working_correlation(structure, alpha)?;
    let r_inv = r.clone().try_inverse().ok_or_else(|| Error::Singular {
        what: "working correlation".into(),
        condition: f64::INFINITY,
    })?;
    let basis = basis_matrices(structure);
    let l = basis.len();
    let gram = DMatrix::from_fn(l, l, |a, b| basis.bases[a].dot(&basis.bases[b]));
    let rhs = nalgebra::DVector::from_fn(l, |a, _| basis.bases[a].dot(&r_inv));
    // pseudo-inverse: for m = 2 the corner basis coincides with the identity
    let coef = gram
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|_| Error::Singular {
            what: "basis Gram matrix".into(),
            condition: f64::INFINITY,
        })?;
    let mut fitted = DMatrix::zeros(structure.m, structure.m);
    for (c, b) in coef.iter().zip(&basis.bases) {
        fitted += b * *c;
    }
    Ok((r_inv - fitted).norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(kind: CorrelationKind, m: usize) -> CorrelationStructure {
        CorrelationStructure::new(kind, m).unwrap()
    }

    #[test]
    fn exchangeable_bases_for_five_occasions() {
        let b = basis_matrices(st(CorrelationKind::Exchangeable, 5));
        assert_eq!(b.len(), 2);
        assert_eq!(b.bases[0], DMatrix::identity(5, 5));
        let expected = DMatrix::from_row_slice(
            5,
            5,
            &[
                0., 1., 1., 1., 1., //
                1., 0., 1., 1., 1., //
                1., 1., 0., 1., 1., //
                1., 1., 1., 0., 1., //
                1., 1., 1., 1., 0.,
            ],
        );
        assert_eq!(b.bases[1], expected);
    }

    #[test]
    fn independence_is_identity_only() {
        let b = basis_matrices(st(CorrelationKind::Independence, 3));
        assert_eq!(b.bases, vec![DMatrix::identity(3, 3)]);
    }

    #[test]
    fn ar1_bases_are_symmetric_tridiagonal_and_corners() {
        let b = basis_matrices(st(CorrelationKind::Ar1, 3));
        assert_eq!(b.len(), 3);
        assert_eq!(
            b.bases[1],
            DMatrix::from_row_slice(3, 3, &[0., 1., 0., 1., 0., 1., 0., 1., 0.])
        );
        assert_eq!(b.bases[2], DMatrix::from_diagonal(&nalgebra::dvector![1., 0., 1.]));
    }

    #[test]
    fn bases_are_symmetric_zero_one() {
        for kind in [CorrelationKind::Independence, CorrelationKind::Exchangeable, CorrelationKind::Ar1] {
            for m in 1..7 {
                for b in basis_matrices(st(kind, m)).bases {
                    assert_eq!(b, b.transpose());
                    assert!(b.iter().all(|&v| v == 0.0 || v == 1.0));
                }
            }
        }
    }

    #[test]
    fn working_correlation_definitions() {
        let ex = working_correlation(st(CorrelationKind::Exchangeable, 3), 0.4).unwrap();
        assert_eq!(ex, DMatrix::from_row_slice(3, 3, &[1., 0.4, 0.4, 0.4, 1., 0.4, 0.4, 0.4, 1.]));
        let ar = working_correlation(st(CorrelationKind::Ar1, 3), 0.5).unwrap();
        assert_eq!(ar, DMatrix::from_row_slice(3, 3, &[1., 0.5, 0.25, 0.5, 1., 0.5, 0.25, 0.5, 1.]));
        let ind = working_correlation(st(CorrelationKind::Independence, 4), 0.7).unwrap();
        assert_eq!(ind, DMatrix::identity(4, 4));
    }

    #[test]
    fn alpha_out_of_range_is_rejected() {
        for a in [-0.1, 1.0, 1.5] {
            assert!(working_correlation(st(CorrelationKind::Exchangeable, 3), a).is_err());
            assert!(working_correlation(st(CorrelationKind::Ar1, 3), a).is_err());
        }
    }

    #[test]
    fn working_correlation_is_positive_definite() {
        for kind in [CorrelationKind::Exchangeable, CorrelationKind::Ar1] {
            for m in 2..9 {
                for i in 0..=19 {
                    let alpha = 0.05 * i as f64;
                    let r = working_correlation(st(kind, m), alpha).unwrap();
                    assert_eq!(r, r.transpose());
                    let min = r.symmetric_eigen().eigenvalues.min();
                    assert!(min > 0.0, "{kind} m={m} alpha={alpha}: {min}");
                }
            }
        }
    }

    #[test]
    fn exchangeable_inverse_lies_in_span() {
        assert!(span_check(st(CorrelationKind::Exchangeable, 5), 0.4).unwrap() < 1e-10);
        assert!(span_check(st(CorrelationKind::Exchangeable, 3), 0.9).unwrap() < 1e-10);
        for m in 2..=8 {
            for i in 0..=19 {
                let alpha = 0.05 * i as f64;
                let res = span_check(st(CorrelationKind::Exchangeable, m), alpha).unwrap();
                assert!(res < 1e-10, "m={m} alpha={alpha}: {res}");
            }
        }
    }

    #[test]
    fn independence_span_residual_is_zero() {
        for m in 1..6 {
            assert_eq!(span_check(st(CorrelationKind::Independence, m), 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn ar1_inverse_lies_in_symmetric_span() {
        // the symmetric tridiagonal basis represents the AR(1) inverse exactly
        for m in 2..=8 {
            let res = span_check(st(CorrelationKind::Ar1, m), 0.6).unwrap();
            assert!(res < 1e-9, "m={m}: {res}");
        }
    }

    #[test]
    fn parses_labels() {
        assert_eq!("EX".parse::<CorrelationKind>().unwrap(), CorrelationKind::Exchangeable);
        assert_eq!("ar1".parse::<CorrelationKind>().unwrap(), CorrelationKind::Ar1);
        assert!("unspecified".parse::<CorrelationKind>().is_err());
    }
}
