//! Selection, bias and spread summaries over Monte Carlo replicates.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Normal-consistency constant for the median absolute deviation.
pub const MAD_SCALE: f64 = 0.6745;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Selection {
    Correct,
    Over,
    Under,
}

/// `Under` if any of the first `d1` coefficients is zero, `Correct` if the
/// nonzero set is exactly the first `d1`, `Over` otherwise.
pub fn classify_selection(estimate: &DVector<f64>, d1: usize) -> Selection {
    assert!(d1 <= estimate.len(), "d1 exceeds the coefficient count");
    if estimate.iter().take(d1).any(|b| *b == 0.0) {
        Selection::Under
    } else if estimate.iter().skip(d1).all(|b| *b == 0.0) {
        Selection::Correct
    } else {
        Selection::Over
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SelectionRates {
    pub correct: f64,
    pub over: f64,
    pub under: f64,
}

/// Percentages of `Correct`, `Over` and `Under` outcomes.
pub fn selection_rates(outcomes: &[Selection]) -> SelectionRates {
    if outcomes.is_empty() {
        return SelectionRates::default();
    }
    let pct = |s: Selection| 100.0 * outcomes.iter().filter(|o| **o == s).count() as f64 / outcomes.len() as f64;
    SelectionRates {
        correct: pct(Selection::Correct),
        over: pct(Selection::Over),
        under: pct(Selection::Under),
    }
}

/// Mean squared estimation error `H^{-1} sum_h |beta^(h) - beta0|^2`.
pub fn compute_mse(estimates: &[DVector<f64>], beta0: &DVector<f64>) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::Contract("MSE needs at least one estimate".into()));
    }
    Ok(estimates.iter().map(|e| (e - beta0).norm_squared()).sum::<f64>() / estimates.len() as f64)
}

/// Absolute relative bias of coefficient `k`, in percent.
pub fn compute_arb(estimates: &[DVector<f64>], beta0: &DVector<f64>, k: usize) -> Result<f64> {
    if beta0[k] == 0.0 {
        return Err(Error::Contract(format!("coefficient {k} is zero in the truth")));
    }
    if estimates.is_empty() {
        return Err(Error::Contract("ARB needs at least one estimate".into()));
    }
    let mean = estimates.iter().map(|e| e[k]).sum::<f64>() / estimates.len() as f64;
    Ok(((mean - beta0[k]) / beta0[k]).abs() * 100.0)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `median |x - median(x)| / 0.6745`.
pub fn mad_sd(values: &[f64]) -> f64 {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    median(&dev) / MAD_SCALE
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustSd {
    /// Robust Monte Carlo SD of the estimates.
    pub sd: f64,
    /// Median of the bootstrap SDs.
    pub sd_m: f64,
    /// Robust spread of the bootstrap SDs around `sd`.
    pub sd_mad: f64,
}

pub fn robust_sd_suite(estimates: &[f64], bootstrap_sds: &[f64]) -> Result<RobustSd> {
    if estimates.len() < 2 || bootstrap_sds.is_empty() {
        return Err(Error::Contract("robust SD summary needs at least two replicates".into()));
    }
    let sd = mad_sd(estimates);
    let dev: Vec<f64> = bootstrap_sds.iter().map(|s| (s - sd).abs()).collect();
    Ok(RobustSd {
        sd,
        sd_m: median(bootstrap_sds),
        sd_mad: median(&dev) / MAD_SCALE,
    })
}
