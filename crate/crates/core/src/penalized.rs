//! SCAD-penalized QIF: local quadratic approximation (LQA) fits, WBIC tuning
//! along a descending lambda path, sandwich variance and the one-step
//! rescaling bootstrap.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{diag_condition, inf_norm, inverse_symmetric, solve_symmetric};
use crate::qif::{active_indices, qif_value, FitResult, QifState, SurveySample, TraceEntry};
use crate::rng;
use crate::scad::{lqa_weights, scad_second_derivative, scad_total, PenaltySpec};

/// Default number of grid points between `lambda_max` and `lambda_max / 100`.
pub const DEFAULT_GRID_SIZE: usize = 25;
pub const DEFAULT_GRID_RATIO: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqaOptions {
    pub max_outer: usize,
    /// Stop once the active-set step has sup-norm at most this value.
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for LqaOptions {
    fn default() -> Self {
        Self {
            max_outer: 100,
            tol: 1e-8,
            max_halvings: 30,
        }
    }
}

impl LqaOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(
                "LQA needs max_outer >= 1 and a positive tolerance".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedFitConfig {
    /// Tuning grid, strictly descending.
    pub lambda_grid: Vec<f64>,
    pub penalty: PenaltySpec,
    pub lqa: LqaOptions,
}

impl PenalizedFitConfig {
    pub fn new(lambda_grid: Vec<f64>, penalty: PenaltySpec, lqa: LqaOptions) -> Result<Self> {
        let cfg = Self {
            lambda_grid,
            penalty,
            lqa,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() {
            return Err(Error::InvalidParameter("lambda grid is empty".into()));
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidParameter("lambda grid values must be finite and nonnegative".into()));
        }
        if self.lambda_grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidParameter("lambda grid must be strictly descending".into()));
        }
        self.penalty.validate()?;
        self.lqa.validate()
    }
}

/// `Q_n(beta) + n sum_k p_lambda(|beta_k|)`.
pub fn penalized_objective(sample: &SurveySample, beta: &DVector<f64>, spec: &PenaltySpec) -> Result<f64> {
    Ok(qif_value(sample, beta)? + sample.n() as f64 * scad_total(beta.as_slice(), spec))
}

pub(crate) fn prune(beta: &mut DVector<f64>, threshold: f64) {
    for b in beta.iter_mut() {
        if b.abs() < threshold {
            *b = 0.0;
        }
    }
}

pub(crate) fn sub_vector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |a, _| v[idx[a]])
}

pub(crate) fn sub_matrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| m[(rows[a], cols[b])])
}

/// `(H_AA + n Gamma, grad_A + n Gamma beta_A)` at the state's parameter.
fn lqa_system(
    state: &QifState,
    active: &[usize],
    spec: &PenaltySpec,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = state.sample_size() as f64;
    let beta_a = sub_vector(&state.beta, active);
    let gamma = lqa_weights(beta_a.as_slice(), spec)?;
    let mut lhs = sub_matrix(&state.hessian_lead(), active, active);
    let mut rhs = sub_vector(&state.gradient(), active);
    for a in 0..active.len() {
        lhs[(a, a)] += n * gamma[a];
        rhs[a] += n * gamma[a] * beta_a[a];
    }
    Ok((lhs, rhs))
}

/// Penalized QIF estimate at a fixed lambda.
///
/// `objective` in the result is the unpenalized `Q_n` at the estimate; the
/// trace records penalized objective values.
pub fn fit_penalized(
    sample: &SurveySample,
    spec: &PenaltySpec,
    init: &DVector<f64>,
    opts: &LqaOptions,
) -> Result<FitResult> {
    spec.validate()?;
    opts.validate()?;
    if init.len() != sample.d() || init.iter().any(|b| !b.is_finite()) {
        return Err(Error::Contract("initial value must be a finite d-vector".into()));
    }
    let thr = spec.zero_threshold;
    let mut beta = init.clone();
    prune(&mut beta, thr);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut f_current = penalized_objective(sample, &beta, spec)?;
    let mut grad_norm = 0.0;
    for _ in 0..opts.max_outer {
        let active = active_indices(&beta, thr);
        if active.is_empty() {
            converged = true;
            grad_norm = 0.0;
            break;
        }
        let state = QifState::evaluate(sample, &beta)?;
        let (lhs, rhs) = lqa_system(&state, &active, spec)?;
        grad_norm = inf_norm(&rhs);
        let step = solve_symmetric(&lhs, &rhs, "LQA Newton matrix")?;
        let step_norm = inf_norm(&step);
        if step_norm <= opts.tol {
            converged = true;
            break;
        }
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let mut cand = beta.clone();
            for (a, &k) in active.iter().enumerate() {
                cand[k] -= scale * step[a];
            }
            prune(&mut cand, thr);
            if let Ok(f) = penalized_objective(sample, &cand, spec) {
                if f <= f_current {
                    accepted = Some((cand, f));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((cand, f)) = accepted else {
            break;
        };
        beta = cand;
        f_current = f;
        iterations += 1;
        trace.push(TraceEntry {
            objective: f,
            step_norm: scale * step_norm,
        });
        if scale * step_norm <= opts.tol {
            converged = true;
            break;
        }
    }
    prune(&mut beta, thr);
    let objective = qif_value(sample, &beta)?;
    Ok(FitResult {
        active_set: active_indices(&beta, thr),
        beta,
        objective,
        iterations,
        converged,
        grad_norm,
        variance: None,
        trace,
        lambda: Some(spec.lambda),
    })
}

/// Smallest lambda (to a relative bracket width of about 5%) whose fit from
/// `init` has an empty active set.
pub fn lambda_max(
    sample: &SurveySample,
    penalty: &PenaltySpec,
    init: &DVector<f64>,
    opts: &LqaOptions,
) -> Result<f64> {
    let n = sample.n() as f64;
    let g0 = inf_norm(&QifState::evaluate(sample, &DVector::zeros(sample.d()))?.gradient()) / n;
    let start = g0.max(init.amax() / penalty.a);
    bracket_lambda_max(start, |lambda| {
        Ok(fit_penalized(sample, &penalty.at(lambda), init, opts)?
            .active_set
            .is_empty())
    })
}

/// Doubling/halving from `start` to bracket the smallest zeroing lambda, then
/// log-scale bisection.
pub(crate) fn bracket_lambda_max(start: f64, mut zeroes: impl FnMut(f64) -> Result<bool>) -> Result<f64> {
    let start = start.max(1e-6);
    let (mut lo, mut hi);
    if zeroes(start)? {
        hi = start;
        lo = start / 2.0;
        let mut guard = 0;
        while zeroes(lo)? {
            hi = lo;
            lo /= 2.0;
            guard += 1;
            if guard > 60 {
                return Ok(hi);
            }
        }
    } else {
        lo = start;
        hi = start * 2.0;
        let mut guard = 0;
        while !zeroes(hi)? {
            lo = hi;
            hi *= 2.0;
            guard += 1;
            if guard > 60 {
                return Err(Error::NumericDomain("no lambda zeroes every coefficient".into()));
            }
        }
    }
    while hi / lo > 1.05 {
        let mid = (lo * hi).sqrt();
        if zeroes(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `size` log-spaced values from `lambda_max` down to `lambda_max / ratio`.
pub fn log_grid(lambda_max: f64, size: usize, ratio: f64) -> Vec<f64> {
    if size == 1 {
        return vec![lambda_max];
    }
    (0..size)
        .map(|j| lambda_max * ratio.powf(-(j as f64) / (size - 1) as f64))
        .collect()
}

/// The default tuning grid for a sample.
pub fn default_grid(
    sample: &SurveySample,
    penalty: &PenaltySpec,
    init: &DVector<f64>,
    opts: &LqaOptions,
) -> Result<Vec<f64>> {
    Ok(log_grid(
        lambda_max(sample, penalty, init, opts)?,
        DEFAULT_GRID_SIZE,
        DEFAULT_GRID_RATIO,
    ))
}

/// `Q_n(beta) + ln(n) df`.
pub fn wbic(qif: f64, n: usize, df: usize) -> f64 {
    qif + (n as f64).ln() * df as f64
}

#[derive(Debug, Clone)]
pub struct PathPoint {
    pub lambda: f64,
    /// `None` when the fit at this lambda failed.
    pub fit: Option<FitResult>,
    pub wbic: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub fit: FitResult,
    pub path: Vec<PathPoint>,
}

/// Fits the descending grid with warm starts and returns the WBIC minimizer.
///
/// Each fit starts from the previous estimate, with its zero coefficients
/// re-seeded from `init` so that a coefficient pruned at a large lambda can
/// re-enter at a smaller one. Ties go to the larger lambda.
pub fn select_lambda(
    sample: &SurveySample,
    config: &PenalizedFitConfig,
    init: &DVector<f64>,
) -> Result<LambdaSelection> {
    config.validate()?;
    select_along_path(&config.lambda_grid, init, sample.n(), |lambda, start| {
        fit_penalized(sample, &config.penalty.at(lambda), start, &config.lqa)
    })
}

/// Descending-path driver shared by the QIF and GEE selectors; `fit` must
/// return the quadratic criterion in `FitResult::objective`.
pub(crate) fn select_along_path(
    grid: &[f64],
    init: &DVector<f64>,
    n: usize,
    mut fit: impl FnMut(f64, &DVector<f64>) -> Result<FitResult>,
) -> Result<LambdaSelection> {
    let mut path = Vec::with_capacity(grid.len());
    let mut warm = init.clone();
    let mut best: Option<(usize, f64)> = None;
    for &lambda in grid {
        let mut start = warm.clone();
        for k in 0..start.len() {
            if start[k] == 0.0 {
                start[k] = init[k];
            }
        }
        match fit(lambda, &start) {
            Ok(f) => {
                let score = wbic(f.objective, n, f.df());
                if best.is_none_or(|(_, b)| score < b) {
                    best = Some((path.len(), score));
                }
                warm = f.beta.clone();
                path.push(PathPoint {
                    lambda,
                    fit: Some(f),
                    wbic: score,
                    error: None,
                });
            }
            Err(e) => path.push(PathPoint {
                lambda,
                fit: None,
                wbic: f64::NAN,
                error: Some(e.to_string()),
            }),
        }
    }
    let Some((idx, _)) = best else {
        let detail = path
            .iter()
            .map(|p| format!("lambda={}: {}", p.lambda, p.error.as_deref().unwrap_or("?")))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::AllFitsFailed(detail));
    };
    let fit = path[idx].fit.clone().expect("best point has a fit");
    Ok(LambdaSelection {
        lambda: path[idx].lambda,
        fit,
        path,
    })
}

/// Rows of the stacked score belonging to the active covariates, in every block.
fn active_rows(active: &[usize], d: usize, blocks: usize) -> Vec<usize> {
    (0..blocks)
        .flat_map(|l| active.iter().map(move |&k| l * d + k))
        .collect()
}

/// With-replacement estimate of `n Var(q_n)` restricted to `rows`.
fn score_variance(state: &QifState, sample: &SurveySample, rows: &[usize]) -> DMatrix<f64> {
    let n = sample.n();
    let r = rows.len();
    let u: Vec<DVector<f64>> = sample
        .clusters
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let qi = state.cluster_score(i);
            DVector::from_fn(r, |a, _| c.weight * qi[rows[a]])
        })
        .collect();
    let mean = u.iter().fold(DVector::zeros(r), |acc, v| acc + v) / n as f64;
    let mut s = DMatrix::zeros(r, r);
    for v in &u {
        let dev = v - &mean;
        s.ger(1.0, &dev, &dev, 1.0);
    }
    let nf = n as f64;
    let pop = sample.population_size;
    let factor = if n > 1 { nf * nf / ((nf - 1.0) * pop * pop) } else { 0.0 };
    s * factor
}

/// Sandwich variance `n^{-1} [H + B_n]^{-1} V [H + B_n]^{-1}` of the active
/// coefficients, where `H = 2 D_1' C_1^{-1} D_1` and `V = 4 D_1' C_1^{-1} S C_1^{-1} D_1`
/// use the active rows and columns of `D_n` and `C_n`.
pub fn sandwich_variance(sample: &SurveySample, fit: &FitResult, spec: &PenaltySpec) -> Result<DMatrix<f64>> {
    let active = &fit.active_set;
    if active.is_empty() {
        return Err(Error::Contract("sandwich variance needs a nonempty active set".into()));
    }
    let state = QifState::evaluate(sample, &fit.beta)?;
    let rows = active_rows(active, sample.d(), sample.basis.len());
    let d1 = sub_matrix(&state.d, &rows, active);
    let mut c1 = sub_matrix(&state.c, &rows, &rows);
    for a in 0..rows.len() {
        c1[(a, a)] += state.ridge;
    }
    let c1_inv = inverse_symmetric(&c1, "active score covariance")?;
    let cd = &c1_inv * &d1;
    let mut bracket = d1.tr_mul(&cd) * 2.0;
    for (a, &k) in active.iter().enumerate() {
        bracket[(a, a)] += scad_second_derivative(fit.beta[k].abs(), spec)?;
    }
    let bracket_inv = inverse_symmetric(&bracket, "sandwich bracket").map_err(|_| Error::Singular {
        what: "sandwich bracket".into(),
        condition: diag_condition(&bracket),
    })?;
    let sigma = score_variance(&state, sample, &rows);
    let meat = cd.tr_mul(&(&sigma * &cd)) * 4.0;
    let v = &bracket_inv * meat * &bracket_inv / sample.n() as f64;
    Ok((&v + v.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapPlan {
    pub replicates: usize,
    pub seed: u64,
    /// Stream keys prepended to the replicate index when deriving RNG streams.
    pub stream_prefix: Vec<u64>,
}

impl BootstrapPlan {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            seed,
            stream_prefix: Vec::new(),
        }
    }

    pub fn with_prefix(mut self, prefix: Vec<u64>) -> Self {
        self.stream_prefix = prefix;
        self
    }

    /// Resample size `n - 1`.
    pub fn resample_size(n: usize) -> usize {
        n.saturating_sub(1)
    }

    fn stream(&self, b: usize) -> rand_chacha::ChaCha8Rng {
        let mut keys = self.stream_prefix.clone();
        keys.push(b as u64);
        rng::stream(self.seed, &keys)
    }
}

/// Rescaled weights `w_i (n/(n-1)) t_i` from `n - 1` equal-probability draws.
pub fn rescaled_weights<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let n = weights.len();
    if n < 2 {
        return Err(Error::Contract("bootstrap needs at least two clusters".into()));
    }
    let mut counts = vec![0u32; n];
    for _ in 0..BootstrapPlan::resample_size(n) {
        counts[rng.random_range(0..n)] += 1;
    }
    let factor = n as f64 / (n - 1) as f64;
    Ok(weights
        .iter()
        .zip(&counts)
        .map(|(w, &t)| w * factor * t as f64)
        .collect())
}

/// Rescaled weights for replicate `b` of a plan.
pub fn rescaled_bootstrap_weights(sample: &SurveySample, plan: &BootstrapPlan, b: usize) -> Result<Vec<f64>> {
    rescaled_weights(&sample.weights(), &mut plan.stream(b))
}

/// One Newton step from the penalized estimate using the QIF with the
/// supplied weights; returns the updated active coefficients.
pub fn bootstrap_one_step(
    sample: &SurveySample,
    fit: &FitResult,
    spec: &PenaltySpec,
    boot_weights: &[f64],
) -> Result<DVector<f64>> {
    let active = &fit.active_set;
    if active.is_empty() {
        return Err(Error::Contract("bootstrap needs a nonempty active set".into()));
    }
    let state = QifState::evaluate_weighted(sample, &fit.beta, boot_weights)?;
    let (lhs, rhs) = lqa_system(&state, active, spec)?;
    let step = solve_symmetric(&lhs, &rhs, "bootstrap Newton matrix")?;
    Ok(sub_vector(&fit.beta, active) - step)
}

#[derive(Debug, Clone)]
pub struct BootstrapSummary {
    pub variance: DMatrix<f64>,
    pub valid: usize,
    pub requested: usize,
}

/// `B^{-1} sum_b (beta^(b) - beta)(beta^(b) - beta)'` over replicates whose
/// Newton matrix was nonsingular.
pub fn bootstrap_variance(
    sample: &SurveySample,
    fit: &FitResult,
    spec: &PenaltySpec,
    plan: &BootstrapPlan,
) -> Result<BootstrapSummary> {
    if plan.replicates < 2 {
        return Err(Error::InvalidParameter("bootstrap needs at least two replicates".into()));
    }
    let base = sub_vector(&fit.beta, &fit.active_set);
    let draws: Vec<Option<DVector<f64>>> = (0..plan.replicates)
        .into_par_iter()
        .map(|b| {
            let w = rescaled_bootstrap_weights(sample, plan, b).ok()?;
            bootstrap_one_step(sample, fit, spec, &w)
                .ok()
                .filter(|v| v.iter().all(|x| x.is_finite()))
        })
        .collect();
    let d1 = base.len();
    let mut variance = DMatrix::zeros(d1, d1);
    let mut valid = 0;
    for est in draws.iter().flatten() {
        let dev = est - &base;
        variance.ger(1.0, &dev, &dev, 1.0);
        valid += 1;
    }
    if valid < 2 {
        return Err(Error::Bootstrap {
            valid,
            requested: plan.replicates,
        });
    }
    Ok(BootstrapSummary {
        variance: variance / valid as f64,
        valid,
        requested: plan.replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{basis_matrices, CorrelationKind, CorrelationStructure};
    use crate::model::{ClusterRecord, MarginalModel};
    use crate::qif::{fit_qif, QifOptions};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64, n: usize, beta0: &[f64]) -> SurveySample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 4;
        let d = beta0.len();
        let clusters = (0..n)
            .map(|i| {
                let x = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
                let shared: f64 = rng.random_range(-1.0..1.0);
                let y = DVector::from_fn(m, |j, _| {
                    let eta: f64 = (0..d).map(|k| x[(j, k)] * beta0[k]).sum::<f64>() + shared;
                    if rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()) {
                        1.0
                    } else {
                        0.0
                    }
                });
                ClusterRecord::new(i.to_string(), y, x, rng.random_range(1.0..3.0)).unwrap()
            })
            .collect();
        let basis = basis_matrices(CorrelationStructure::new(CorrelationKind::Exchangeable, m).unwrap());
        SurveySample::new(clusters, 4.0 * n as f64, MarginalModel::default(), basis).unwrap()
    }

    #[test]
    fn objective_trivial_cases() {
        let s = sample(1, 40, &[1.0, 0.0, -1.0]);
        let beta = DVector::from_vec(vec![1.5, -2.0, 3.0]);
        let zero_pen = PenaltySpec::default();
        assert_eq!(penalized_objective(&s, &beta, &zero_pen).unwrap(), qif_value(&s, &beta).unwrap());
        let spec = PenaltySpec::with_lambda(0.3).unwrap();
        let z = DVector::zeros(3);
        assert_eq!(penalized_objective(&s, &z, &spec).unwrap(), qif_value(&s, &z).unwrap());
        let capped = qif_value(&s, &beta).unwrap() + 40.0 * 3.0 * 4.7 * 0.09 / 2.0;
        assert_relative_eq!(penalized_objective(&s, &beta, &spec).unwrap(), capped, max_relative = 1e-14);
    }

    #[test]
    fn zero_lambda_matches_unpenalized_fit() {
        for seed in 0..10 {
            let s = sample(seed, 120, &[0.8, -0.5, 0.0]);
            let qif = fit_qif(&s, &DVector::zeros(3), &QifOptions::default()).unwrap();
            let pen = fit_penalized(&s, &PenaltySpec::default(), &DVector::zeros(3), &LqaOptions::default());
            // every coordinate starts at zero and stays pruned, so start from a dense point
            assert!(pen.unwrap().active_set.is_empty());
            let pen = fit_penalized(&s, &PenaltySpec::default(), &DVector::from_element(3, 0.1), &LqaOptions::default())
                .unwrap();
            assert!((&pen.beta - &qif.beta).amax() < 1e-6, "seed {seed}: {} vs {} conv {} it {}", pen.beta, qif.beta, pen.converged, pen.iterations);
            let again = fit_penalized(&s, &PenaltySpec::default(), &qif.beta, &LqaOptions::default()).unwrap();
            assert!((&again.beta - &qif.beta).amax() < 1e-8);
        }
    }

    #[test]
    fn penalized_trace_is_monotone_and_active_set_consistent() {
        let s = sample(3, 150, &[1.0, -0.8, 0.0, 0.0]);
        let init = fit_qif(&s, &DVector::zeros(4), &QifOptions::default()).unwrap().beta;
        for lambda in [0.02, 0.05, 0.1, 0.2] {
            let spec = PenaltySpec::with_lambda(lambda).unwrap();
            let fit = fit_penalized(&s, &spec, &init, &LqaOptions::default()).unwrap();
            let start = penalized_objective(&s, &init, &spec).unwrap();
            let mut prev = start;
            for t in &fit.trace {
                assert!(t.objective <= prev);
                prev = t.objective;
            }
            let expected: Vec<usize> = (0..4).filter(|&k| fit.beta[k].abs() >= 1e-3).collect();
            assert_eq!(fit.active_set, expected);
            assert!(fit.beta.iter().all(|b| *b == 0.0 || b.abs() >= 1e-3));
        }
    }

    #[test]
    fn huge_lambda_zeroes_everything_and_zero_dominates() {
        let s = sample(4, 100, &[0.7, -0.4, 0.3]);
        let init = fit_qif(&s, &DVector::zeros(3), &QifOptions::default()).unwrap().beta;
        let opts = LqaOptions::default();
        let lmax = lambda_max(&s, &PenaltySpec::default(), &init, &opts).unwrap();
        let spec = PenaltySpec::with_lambda(10.0 * lmax).unwrap();
        let fit = fit_penalized(&s, &spec, &init, &opts).unwrap();
        assert!(fit.active_set.is_empty());
        // brute-force oracle: the origin beats every point of a coarse grid
        let f0 = penalized_objective(&s, &DVector::zeros(3), &spec).unwrap();
        for i in -4..=4 {
            for j in -4..=4 {
                for k in -4..=4 {
                    if i == 0 && j == 0 && k == 0 {
                        continue;
                    }
                    let b = DVector::from_vec(vec![i as f64 * 0.25, j as f64 * 0.25, k as f64 * 0.25]);
                    assert!(penalized_objective(&s, &b, &spec).unwrap() >= f0);
                }
            }
        }
        let below = fit_penalized(&s, &PenaltySpec::with_lambda(lmax / 1.2).unwrap(), &init, &opts).unwrap();
        assert!(!below.active_set.is_empty());
    }

    #[test]
    fn wbic_arithmetic() {
        assert_relative_eq!(wbic(10.0, 300, 3), 27.11135, epsilon = 1e-4);
    }

    #[test]
    fn grid_is_log_spaced_and_descending() {
        let g = log_grid(2.0, 25, 100.0);
        assert_eq!(g.len(), 25);
        assert_eq!(g[0], 2.0);
        assert_relative_eq!(g[24], 0.02, max_relative = 1e-12);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
        assert_relative_eq!(g[1] / g[0], g[24] / g[23], max_relative = 1e-12);
    }

    #[test]
    fn single_point_grid_returns_that_lambda() {
        let s = sample(5, 80, &[0.8, 0.0]);
        let cfg = PenalizedFitConfig::new(vec![0.05], PenaltySpec::default(), LqaOptions::default()).unwrap();
        let init = fit_qif(&s, &DVector::zeros(2), &QifOptions::default()).unwrap().beta;
        let sel = select_lambda(&s, &cfg, &init).unwrap();
        assert_eq!(sel.lambda, 0.05);
        assert_eq!(sel.path.len(), 1);
    }

    #[test]
    fn selection_minimizes_wbic_with_ties_to_larger_lambda() {
        let s = sample(6, 200, &[1.0, -0.8, 0.0, 0.0, 0.0]);
        let init = fit_qif(&s, &DVector::zeros(5), &QifOptions::default()).unwrap().beta;
        let grid = default_grid(&s, &PenaltySpec::default(), &init, &LqaOptions::default()).unwrap();
        let cfg = PenalizedFitConfig::new(grid, PenaltySpec::default(), LqaOptions::default()).unwrap();
        let sel = select_lambda(&s, &cfg, &init).unwrap();
        let min = sel.path.iter().map(|p| p.wbic).fold(f64::INFINITY, f64::min);
        let first = sel.path.iter().position(|p| p.wbic == min).unwrap();
        assert_eq!(sel.lambda, sel.path[first].lambda);
        assert!(sel.path[0].fit.as_ref().unwrap().active_set.is_empty());
    }

    #[test]
    fn grid_validation() {
        let p = PenaltySpec::default();
        let o = LqaOptions::default();
        assert!(PenalizedFitConfig::new(vec![], p, o).is_err());
        assert!(PenalizedFitConfig::new(vec![0.1, 0.2], p, o).is_err());
        assert!(PenalizedFitConfig::new(vec![0.2, 0.1], p, o).is_ok());
    }

    #[test]
    fn sandwich_zero_lambda_is_unpenalized_sandwich() {
        let s = sample(7, 150, &[0.8, -0.6]);
        let fit = fit_qif(&s, &DVector::zeros(2), &QifOptions::default()).unwrap();
        let v = sandwich_variance(&s, &fit, &PenaltySpec::default()).unwrap();
        let st = QifState::evaluate(&s, &fit.beta).unwrap();
        let h_inv = (st.hessian_lead() / s.n() as f64).try_inverse().unwrap();
        let rows: Vec<usize> = (0..s.score_len()).collect();
        let sigma = score_variance(&st, &s, &rows);
        let cd = &st.c_inv * &st.d;
        let manual = &h_inv * (cd.tr_mul(&(&sigma * &cd)) * 4.0) * &h_inv / s.n() as f64;
        assert!((&v - &manual).amax() < 1e-10 * (1.0 + manual.amax()));
        assert!(v.clone().symmetric_eigen().eigenvalues.min() > 0.0);
    }

    #[test]
    fn bootstrap_weight_rescaling() {
        // w = 10, n = 5, t = 2 gives 25
        assert_relative_eq!(10.0 * (5.0 / 4.0) * 2.0, 25.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = [10.0, 20.0, 30.0, 40.0, 50.0];
        let reps = 100_000;
        let mut mean = [0.0; 5];
        for _ in 0..reps {
            let b = rescaled_weights(&w, &mut rng).unwrap();
            let draws: f64 = b.iter().zip(&w).map(|(bi, wi)| bi / wi * 4.0 / 5.0).sum();
            assert_relative_eq!(draws, 4.0, epsilon = 1e-12);
            for (m, x) in mean.iter_mut().zip(&b) {
                *m += x / reps as f64;
            }
        }
        for (m, wi) in mean.iter().zip(&w) {
            assert!((m / wi - 1.0).abs() < 0.01, "{m} vs {wi}");
        }
    }

    #[test]
    fn bootstrap_with_original_weights_stays_at_fit() {
        let s = sample(9, 150, &[0.9, -0.7, 0.0]);
        let init = fit_qif(&s, &DVector::zeros(3), &QifOptions::default()).unwrap().beta;
        let spec = PenaltySpec::with_lambda(0.05).unwrap();
        let fit = fit_penalized(&s, &spec, &init, &LqaOptions { tol: 1e-10, ..Default::default() }).unwrap();
        let one = bootstrap_one_step(&s, &fit, &spec, &s.weights()).unwrap();
        let base = sub_vector(&fit.beta, &fit.active_set);
        assert!((one - base).amax() < 1e-6);
    }

    #[test]
    fn bootstrap_step_is_weight_scale_invariant_without_penalty_curvature() {
        let s = sample(10, 120, &[0.9, -0.7]);
        let fit = fit_qif(&s, &DVector::zeros(2), &QifOptions::default()).unwrap();
        let spec = PenaltySpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rescaled_weights(&s.weights(), &mut rng).unwrap();
        let a = bootstrap_one_step(&s, &fit, &spec, &w).unwrap();
        let scaled: Vec<f64> = w.iter().map(|x| 7.0 * x).collect();
        let b = bootstrap_one_step(&s, &fit, &spec, &scaled).unwrap();
        assert!((a - b).amax() < 1e-9);
    }

    #[test]
    fn bootstrap_variance_is_psd_and_reproducible() {
        let s = sample(11, 100, &[0.9, -0.7, 0.0]);
        let init = fit_qif(&s, &DVector::zeros(3), &QifOptions::default()).unwrap().beta;
        let spec = PenaltySpec::with_lambda(0.05).unwrap();
        let fit = fit_penalized(&s, &spec, &init, &LqaOptions::default()).unwrap();
        let plan = BootstrapPlan::new(50, 99);
        let v1 = bootstrap_variance(&s, &fit, &spec, &plan).unwrap();
        let v2 = bootstrap_variance(&s, &fit, &spec, &plan).unwrap();
        assert_eq!(v1.variance, v2.variance);
        assert_eq!(v1.valid, 50);
        assert!((&v1.variance - v1.variance.transpose()).amax() <= 1e-12);
        assert!(v1.variance.clone().symmetric_eigen().eigenvalues.min() >= -1e-12);
        assert!(v1.variance.trace() > 0.0);
        assert!(bootstrap_variance(&s, &fit, &spec, &BootstrapPlan::new(1, 0)).is_err());
    }
}
