//! Probability-proportional-to-size sampling with replacement.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::population::FinitePopulation;
use crate::correlation::BasisSet;
use crate::error::{Error, Result};
use crate::model::MarginalModel;
use crate::qif::SurveySample;

/// Indices of `n` independent draws with probabilities `z_i / sum z`.
pub fn ppswr_indices<R: Rng + ?Sized>(size_measures: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(size_measures)
        .map_err(|e| Error::InvalidParameter(format!("invalid size measures: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Draws `n` units with replacement and attaches Hansen-Hurwitz weights
/// `1 / (n p_i)`; repeated draws stay separate units.
pub fn draw_sample_ppswr<R: Rng + ?Sized>(
    pop: &FinitePopulation,
    n: usize,
    basis: &BasisSet,
    rng: &mut R,
) -> Result<SurveySample> {
    if n == 0 {
        return Err(Error::InvalidParameter("sample size must be positive".into()));
    }
    let total: f64 = pop.size_measures.iter().sum();
    let idx = ppswr_indices(&pop.size_measures, n, rng)?;
    let clusters = idx
        .iter()
        .map(|&i| {
            let mut c = pop.clusters[i].clone();
            c.weight = total / (n as f64 * pop.size_measures[i]);
            c
        })
        .collect();
    SurveySample::new(clusters, pop.len() as f64, MarginalModel::default(), basis.clone())
}
