//! Finite populations of clusters with correlated binary responses.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::bvn::{bvn_cdf, bvn_density, norm_quantile};
use crate::error::{Error, Result};
use crate::model::{link_inverse, ClusterRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationConfig {
    pub size: usize,
    pub cluster_size: usize,
    pub beta0: Vec<f64>,
    /// Target pairwise Pearson correlation of the binary responses.
    pub alpha_true: f64,
    pub covariate_range: (f64, f64),
}

impl Default for PopulationConfig {
    fn default() -> Self {
        let mut beta0 = vec![0.0; 10];
        beta0[..3].copy_from_slice(&[0.8, -0.7, -0.6]);
        Self {
            size: 10_000,
            cluster_size: 5,
            beta0,
            alpha_true: 0.4,
            covariate_range: (0.0, 0.8),
        }
    }
}

impl PopulationConfig {
    pub fn dim(&self) -> usize {
        self.beta0.len()
    }

    /// Number of leading nonzero coefficients.
    pub fn support_size(&self) -> usize {
        self.beta0.iter().take_while(|b| **b != 0.0).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.cluster_size == 0 {
            return Err(Error::InvalidParameter("population and cluster sizes must be positive".into()));
        }
        if self.beta0.is_empty() || self.beta0.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter("beta0 must be a nonempty finite vector".into()));
        }
        let d1 = self.support_size();
        if self.beta0[d1..].iter().any(|b| *b != 0.0) {
            return Err(Error::InvalidParameter(
                "the nonzero coefficients of beta0 must come first".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.alpha_true) {
            return Err(Error::InvalidParameter(format!(
                "alpha_true {} outside [0, 1)",
                self.alpha_true
            )));
        }
        let (lo, hi) = self.covariate_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParameter("covariate range must satisfy lo < hi".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FinitePopulation {
    /// Clusters with placeholder weight 1.
    pub clusters: Vec<ClusterRecord>,
    /// `z_i = sum_j y_ij + 1`.
    pub size_measures: Vec<f64>,
}

impl FinitePopulation {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// Latent normal correlation giving `P(Y_l = 1, Y_r = 1) = p_l p_r + alpha sqrt(v_l v_r)`
/// for binary margins `p_l`, `p_r`.
pub fn latent_correlation(p_l: f64, p_r: f64, alpha: f64) -> std::result::Result<f64, String> {
    if alpha == 0.0 {
        return Ok(0.0);
    }
    let target = p_l * p_r + alpha * (p_l * (1.0 - p_l) * p_r * (1.0 - p_r)).sqrt();
    let (tl, tr) = (norm_quantile(p_l), norm_quantile(p_r));
    let f = |rho: f64| bvn_cdf(tl, tr, rho) - target;
    let mut lo = 0.0;
    let mut hi = 1.0 - 1e-12;
    if f(hi) < 0.0 {
        return Err(format!(
            "joint probability {target:.6} exceeds the attainable maximum for margins {p_l:.4}, {p_r:.4}"
        ));
    }
    // safeguarded Newton: d/drho of the orthant probability is the density
    let mut rho = alpha;
    for _ in 0..100 {
        let val = f(rho);
        if val.abs() < 1e-13 {
            return Ok(rho);
        }
        if val < 0.0 {
            lo = rho;
        } else {
            hi = rho;
        }
        let slope = bvn_density(tl, tr, rho);
        let newton = rho - val / slope;
        rho = if slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-14 {
            return Ok(rho);
        }
    }
    Ok(rho)
}

/// One cluster of the population: covariates, calibrated latent correlation and
/// thresholded normal draws.
fn generate_cluster<R: Rng + ?Sized>(cfg: &PopulationConfig, index: usize, rng: &mut R) -> Result<ClusterRecord> {
    let m = cfg.cluster_size;
    let d = cfg.dim();
    let (lo, hi) = cfg.covariate_range;
    let x = DMatrix::from_fn(m, d, |_, _| rng.random_range(lo..hi));
    let beta = DVector::from_column_slice(&cfg.beta0);
    let p: Vec<f64> = (&x * &beta).iter().map(|&e| link_inverse(e)).collect();
    let mut corr = DMatrix::identity(m, m);
    for l in 0..m {
        for r in l + 1..m {
            let rho = latent_correlation(p[l], p[r], cfg.alpha_true).map_err(|reason| Error::Calibration {
                cluster: index,
                l,
                r,
                reason,
            })?;
            corr[(l, r)] = rho;
            corr[(r, l)] = rho;
        }
    }
    let chol = corr.cholesky().ok_or_else(|| Error::Calibration {
        cluster: index,
        l: 0,
        r: 0,
        reason: "latent correlation matrix is not positive definite".into(),
    })?;
    let eps = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let z = chol.l() * eps;
    let y = DVector::from_fn(m, |j, _| if z[j] <= norm_quantile(p[j]) { 1.0 } else { 0.0 });
    ClusterRecord::new(index.to_string(), y, x, 1.0)
}

pub fn generate_population<R: Rng + ?Sized>(cfg: &PopulationConfig, rng: &mut R) -> Result<FinitePopulation> {
    cfg.validate()?;
    let clusters = (0..cfg.size)
        .map(|i| generate_cluster(cfg, i, rng))
        .collect::<Result<Vec<_>>>()?;
    let size_measures = clusters.iter().map(|c| c.y.sum() + 1.0).collect();
    Ok(FinitePopulation {
        clusters,
        size_measures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pearson_within(pop: &FinitePopulation) -> f64 {
        let m = pop.clusters[0].size();
        let all: Vec<f64> = pop.clusters.iter().flat_map(|c| c.y.iter().copied()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        let mut cov = 0.0;
        let mut pairs = 0.0;
        for c in &pop.clusters {
            for l in 0..m {
                for r in l + 1..m {
                    cov += (c.y[l] - mean) * (c.y[r] - mean);
                    pairs += 1.0;
                }
            }
        }
        cov / pairs / var
    }

    #[test]
    fn calibration_hits_joint_probability() {
        for &(pl, pr) in &[(0.5, 0.5), (0.6, 0.45), (0.3, 0.7), (0.55, 0.4)] {
            let rho = latent_correlation(pl, pr, 0.4).unwrap();
            let target = pl * pr + 0.4 * (pl * (1.0 - pl) * pr * (1.0 - pr)).sqrt();
            let got = bvn_cdf(norm_quantile(pl), norm_quantile(pr), rho);
            assert!((got - target).abs() < 1e-10);
        }
        assert_eq!(latent_correlation(0.3, 0.6, 0.0).unwrap(), 0.0);
        assert!(latent_correlation(0.02, 0.98, 0.9).is_err());
    }

    #[test]
    fn zero_coefficients_give_half_means() {
        let cfg = PopulationConfig {
            size: 50_000,
            beta0: vec![0.0; 3],
            alpha_true: 0.3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pop = generate_population(&cfg, &mut rng);
        // leading-zero beta0 has empty support, still valid
        let pop = pop.unwrap();
        let total: f64 = pop.clusters.iter().map(|c| c.y.sum()).sum();
        let mean = total / (50_000.0 * 5.0);
        assert!((mean - 0.5).abs() < 0.004, "{mean}");
    }

    #[test]
    fn within_cluster_correlation_matches_target() {
        let cfg = PopulationConfig {
            size: 40_000,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pop = generate_population(&cfg, &mut rng).unwrap();
        let r = pearson_within(&pop);
        assert!((r - 0.4).abs() < 0.02, "{r}");
        let zero = PopulationConfig {
            size: 40_000,
            alpha_true: 0.0,
            ..Default::default()
        };
        let pop0 = generate_population(&zero, &mut rng).unwrap();
        assert!(pearson_within(&pop0).abs() < 0.01);
    }

    #[test]
    fn size_measures_are_response_totals_plus_one() {
        let cfg = PopulationConfig {
            size: 100,
            ..Default::default()
        };
        let pop = generate_population(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (c, z) in pop.clusters.iter().zip(&pop.size_measures) {
            assert_eq!(*z, c.y.sum() + 1.0);
            assert!(*z >= 1.0);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = PopulationConfig {
            beta0: vec![0.0, 1.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PopulationConfig {
            alpha_true: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
