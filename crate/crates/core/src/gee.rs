//! Survey-weighted generalized estimating equations, plain and SCAD-penalized.

use nalgebra::{DMatrix, DVector};

use crate::correlation::{working_correlation, CorrelationKind, CorrelationStructure};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, inf_norm, inverse_symmetric, solve_symmetric};
use crate::penalized::{bracket_lambda_max, prune, select_along_path, sub_matrix, sub_vector, LambdaSelection, LqaOptions};
use crate::qif::{active_indices, FitResult, SurveySample, TraceEntry, RIDGE_FACTOR};
use crate::scad::{lqa_weights, PenaltySpec, DEFAULT_ZERO_THRESHOLD};

/// Upper clamp for the moment estimate of the working-correlation parameter.
pub const ALPHA_MAX: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaUpdate {
    Moment,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeeConfig {
    pub kind: CorrelationKind,
    pub max_iter: usize,
    pub tol: f64,
    pub alpha_update: AlphaUpdate,
}

impl GeeConfig {
    pub fn new(kind: CorrelationKind) -> Self {
        Self {
            kind,
            max_iter: 100,
            tol: 1e-10,
            alpha_update: AlphaUpdate::Moment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("GEE needs max_iter >= 1 and a positive tolerance".into()));
        }
        if let AlphaUpdate::Fixed(a) = self.alpha_update {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::InvalidParameter(format!("fixed alpha {a} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

struct Pieces {
    /// Scaled Jacobian diagonal `sigma^2 / sqrt(a)`.
    s: DVector<f64>,
    /// Pearson residuals.
    e: DVector<f64>,
}

fn pieces(sample: &SurveySample, i: usize, beta: &DVector<f64>) -> Result<Pieces> {
    let rec = &sample.clusters[i];
    let eta = &rec.x * beta;
    let model = &sample.model;
    let mut s = DVector::zeros(rec.size());
    let mut e = DVector::zeros(rec.size());
    for j in 0..rec.size() {
        let mu = model.mean(eta[j]);
        let sigma2 = model.variance_fn(mu);
        let a = model.dispersion * sigma2;
        if !(a > 0.0) {
            return Err(Error::NumericDomain(format!("cluster {}: non-positive variance", rec.id)));
        }
        s[j] = sigma2 / a.sqrt();
        e[j] = (rec.y[j] - mu) / a.sqrt();
    }
    Ok(Pieces { s, e })
}

fn check_beta(sample: &SurveySample, beta: &DVector<f64>) -> Result<()> {
    if beta.len() != sample.d() || beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Dimension(format!(
            "beta must be a finite vector of length {}",
            sample.d()
        )));
    }
    Ok(())
}

fn correlation_inverse(sample: &SurveySample, kind: CorrelationKind, alpha: f64) -> Result<DMatrix<f64>> {
    let r = working_correlation(CorrelationStructure::new(kind, sample.m())?, alpha)?;
    inverse_symmetric(&r, "working correlation")
}

/// Per-cluster scores `X' diag(s) R^{-1} e` (unweighted), one column per cluster.
fn cluster_scores(sample: &SurveySample, beta: &DVector<f64>, r_inv: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(sample.d(), sample.n());
    for (i, rec) in sample.clusters.iter().enumerate() {
        let p = pieces(sample, i, beta)?;
        let v = (r_inv * &p.e).component_mul(&p.s);
        out.set_column(i, &rec.x.tr_mul(&v));
    }
    Ok(out)
}

/// `sum_i w_i J_i' A_i^{-1/2} R(alpha)^{-1} A_i^{-1/2} (y_i - mu_i)`, without a `1/N` factor.
pub fn gee_score(sample: &SurveySample, beta: &DVector<f64>, alpha: f64, kind: CorrelationKind) -> Result<DVector<f64>> {
    check_beta(sample, beta)?;
    let r_inv = correlation_inverse(sample, kind, alpha)?;
    let scores = cluster_scores(sample, beta, &r_inv)?;
    Ok(scores * DVector::from_vec(sample.weights()))
}

/// Score and Fisher information `sum_i w_i X' diag(s) R^{-1} diag(s) X`.
fn score_and_information(
    sample: &SurveySample,
    beta: &DVector<f64>,
    r_inv: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = sample.d();
    let mut g = DVector::zeros(d);
    let mut h = DMatrix::zeros(d, d);
    for (i, rec) in sample.clusters.iter().enumerate() {
        let p = pieces(sample, i, beta)?;
        let w = rec.weight;
        let v = (r_inv * &p.e).component_mul(&p.s);
        g.gemv_tr(w, &rec.x, &v, 1.0);
        let mut sx = rec.x.clone();
        for (j, mut row) in sx.row_iter_mut().enumerate() {
            row *= p.s[j];
        }
        let rsx = r_inv * &sx;
        h.gemm_tr(w, &sx, &rsx, 1.0);
    }
    Ok((g, (&h + h.transpose()) * 0.5))
}

/// Weighted moment estimator of the working-correlation parameter from Pearson residuals.
pub fn estimate_alpha(sample: &SurveySample, beta: &DVector<f64>, kind: CorrelationKind) -> Result<f64> {
    check_beta(sample, beta)?;
    let m = sample.m();
    if kind == CorrelationKind::Independence {
        return Ok(0.0);
    }
    if m < 2 {
        return Err(Error::Contract("alpha needs at least two occasions per cluster".into()));
    }
    let mut total_w = 0.0;
    let mut sq = 0.0;
    let mut cross = 0.0;
    for (i, rec) in sample.clusters.iter().enumerate() {
        let e = pieces(sample, i, beta)?.e;
        let w = rec.weight;
        total_w += w;
        sq += w * e.norm_squared();
        cross += w * match kind {
            CorrelationKind::Exchangeable => {
                let s = e.sum();
                (s * s - e.norm_squared()) / 2.0
            }
            _ => (0..m - 1).map(|j| e[j] * e[j + 1]).sum::<f64>(),
        };
    }
    let phi = sq / (total_w * m as f64);
    if !(phi > 0.0) {
        return Ok(0.0);
    }
    let pairs = match kind {
        CorrelationKind::Exchangeable => (m * (m - 1) / 2) as f64,
        _ => (m - 1) as f64,
    };
    let alpha = cross / (total_w * pairs * phi);
    Ok(alpha.clamp(0.0, ALPHA_MAX))
}

fn current_alpha(sample: &SurveySample, beta: &DVector<f64>, config: &GeeConfig) -> Result<f64> {
    match config.alpha_update {
        AlphaUpdate::Fixed(a) => Ok(a),
        AlphaUpdate::Moment => estimate_alpha(sample, beta, config.kind),
    }
}

/// `n g_n' V_g^{-1} g_n` with `g_n = N^{-1} sum w_i g_i` and
/// `V_g = N^{-1} sum w_i g_i g_i'`, used in place of `Q_n` when tuning PGEE.
pub fn gee_quadratic_form(
    sample: &SurveySample,
    beta: &DVector<f64>,
    alpha: f64,
    kind: CorrelationKind,
) -> Result<f64> {
    check_beta(sample, beta)?;
    let r_inv = correlation_inverse(sample, kind, alpha)?;
    let scores = cluster_scores(sample, beta, &r_inv)?;
    let inv_pop = 1.0 / sample.population_size;
    let d = sample.d();
    let mut g = DVector::zeros(d);
    let mut v = DMatrix::zeros(d, d);
    for (i, rec) in sample.clusters.iter().enumerate() {
        let gi = scores.column(i);
        g.axpy(rec.weight * inv_pop, &gi, 1.0);
        v.ger(rec.weight * inv_pop, &gi, &gi, 1.0);
    }
    let trace = v.trace();
    if !(trace > 0.0) {
        return Ok(0.0);
    }
    let ridge = RIDGE_FACTOR * trace / d as f64;
    for k in 0..d {
        v[(k, k)] += ridge;
    }
    let ch = cholesky(v, "GEE score covariance")?;
    Ok(sample.n() as f64 * g.dot(&ch.solve(&g)).max(0.0))
}

/// Fisher scoring for the survey-weighted GEE, re-estimating alpha before each step.
pub fn fit_gee(sample: &SurveySample, config: &GeeConfig, init: &DVector<f64>) -> Result<FitResult> {
    config.validate()?;
    check_beta(sample, init)?;
    let mut beta = init.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut alpha = current_alpha(sample, &beta, config)?;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..config.max_iter {
        let r_inv = correlation_inverse(sample, config.kind, alpha)?;
        let (g, h) = score_and_information(sample, &beta, &r_inv)?;
        grad_norm = inf_norm(&g);
        let step = solve_symmetric(&h, &g, "GEE information")?;
        let step_norm = inf_norm(&step);
        if step_norm <= config.tol {
            converged = true;
            break;
        }
        beta += &step;
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NumericDomain("GEE iterate diverged".into()));
        }
        alpha = current_alpha(sample, &beta, config)?;
        iterations += 1;
        trace.push(TraceEntry {
            objective: grad_norm,
            step_norm,
        });
    }
    Ok(FitResult {
        objective: gee_quadratic_form(sample, &beta, alpha, config.kind)?,
        active_set: active_indices(&beta, DEFAULT_ZERO_THRESHOLD),
        beta,
        iterations,
        converged,
        grad_norm,
        variance: None,
        trace,
        lambda: None,
    })
}

/// LQA iteration on the GEE score. The score and information are scaled by
/// `n / N` so they sit on the same scale as the `n Gamma` penalty terms.
pub fn fit_penalized_gee(
    sample: &SurveySample,
    spec: &PenaltySpec,
    config: &GeeConfig,
    init: &DVector<f64>,
    opts: &LqaOptions,
) -> Result<FitResult> {
    config.validate()?;
    spec.validate()?;
    check_beta(sample, init)?;
    let n = sample.n() as f64;
    let scale = n / sample.population_size;
    let thr = spec.zero_threshold;
    let mut beta = init.clone();
    prune(&mut beta, thr);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = 0.0;
    for _ in 0..opts.max_outer {
        let active = active_indices(&beta, thr);
        if active.is_empty() {
            converged = true;
            grad_norm = 0.0;
            break;
        }
        let alpha = current_alpha(sample, &beta, config)?;
        let r_inv = correlation_inverse(sample, config.kind, alpha)?;
        let (g, h) = score_and_information(sample, &beta, &r_inv)?;
        let beta_a = sub_vector(&beta, &active);
        let gamma = lqa_weights(beta_a.as_slice(), spec)?;
        let mut lhs = sub_matrix(&h, &active, &active) * scale;
        let mut rhs = -sub_vector(&g, &active) * scale;
        for a in 0..active.len() {
            lhs[(a, a)] += n * gamma[a];
            rhs[a] += n * gamma[a] * beta_a[a];
        }
        grad_norm = inf_norm(&rhs);
        let step = solve_symmetric(&lhs, &rhs, "penalized GEE matrix")?;
        let step_norm = inf_norm(&step);
        for (a, &k) in active.iter().enumerate() {
            beta[k] -= step[a];
        }
        prune(&mut beta, thr);
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NumericDomain("penalized GEE iterate diverged".into()));
        }
        iterations += 1;
        trace.push(TraceEntry {
            objective: grad_norm,
            step_norm,
        });
        if step_norm <= opts.tol {
            converged = true;
            break;
        }
    }
    let alpha = current_alpha(sample, &beta, config)?;
    Ok(FitResult {
        objective: gee_quadratic_form(sample, &beta, alpha, config.kind)?,
        active_set: active_indices(&beta, thr),
        beta,
        iterations,
        converged,
        grad_norm,
        variance: None,
        trace,
        lambda: Some(spec.lambda),
    })
}

/// Smallest lambda whose penalized GEE fit from `init` is all zero.
pub fn gee_lambda_max(
    sample: &SurveySample,
    penalty: &PenaltySpec,
    config: &GeeConfig,
    init: &DVector<f64>,
    opts: &LqaOptions,
) -> Result<f64> {
    let zero = DVector::zeros(sample.d());
    let alpha = current_alpha(sample, &zero, config)?;
    let g0 = gee_score(sample, &zero, alpha, config.kind)?;
    let start = (inf_norm(&g0) / sample.population_size).max(init.amax() / penalty.a);
    bracket_lambda_max(start, |lambda| {
        Ok(fit_penalized_gee(sample, &penalty.at(lambda), config, init, opts)?
            .active_set
            .is_empty())
    })
}

/// WBIC selection for the penalized GEE with the GEE quadratic form in place of `Q_n`.
pub fn select_lambda_gee(
    sample: &SurveySample,
    grid: &[f64],
    penalty: &PenaltySpec,
    config: &GeeConfig,
    init: &DVector<f64>,
    opts: &LqaOptions,
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("lambda grid is empty".into()));
    }
    select_along_path(grid, init, sample.n(), |lambda, start| {
        fit_penalized_gee(sample, &penalty.at(lambda), config, start, opts)
    })
}
