//! Survey-weighted quadratic inference function.
//!
//! For cluster `i` the extended quasi-score stacks one block per basis matrix,
//! `q_i^(l) = J_i' A_i^{-1/2} M_l A_i^{-1/2} (y_i - mu_i)`. With design weights
//! `w_i` and known population size `N`,
//!
//! ```text
//! q_n = N^{-1} sum_i w_i q_i,   C_n = N^{-1} sum_i w_i q_i q_i',   Q_n = n q_n' C_n^{-1} q_n.
//! ```
//!
//! Gradients are analytic for the logit link, including the `dC_n/dbeta_k`
//! correction, and Newton steps use the leading Hessian term
//! `2 n D_n' C_n^{-1} D_n`.

use nalgebra::{DMatrix, DVector};

use crate::correlation::BasisSet;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, inf_norm, solve_symmetric};
use crate::model::{ClusterRecord, MarginalModel};
use crate::scad::DEFAULT_ZERO_THRESHOLD;

/// Relative size of the ridge added to `C_n` before factorization.
pub const RIDGE_FACTOR: f64 = 1e-8;

/// A sample of clusters drawn from a finite population of known size.
#[derive(Debug, Clone)]
pub struct SurveySample {
    pub clusters: Vec<ClusterRecord>,
    /// Finite population size `N` used in the `1/N` scaling of scores.
    pub population_size: f64,
    pub model: MarginalModel,
    pub basis: BasisSet,
}

impl SurveySample {
    pub fn new(
        clusters: Vec<ClusterRecord>,
        population_size: f64,
        model: MarginalModel,
        basis: BasisSet,
    ) -> Result<Self> {
        let sample = Self {
            clusters,
            population_size,
            model,
            basis,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.clusters.len();
        if n == 0 {
            return Err(Error::Contract("sample has no clusters".into()));
        }
        if !(self.population_size > 0.0) || !self.population_size.is_finite() {
            return Err(Error::Contract(format!(
                "population size {} must be positive",
                self.population_size
            )));
        }
        if self.basis.is_empty() {
            return Err(Error::Contract("empty basis set".into()));
        }
        let m = self.basis.m();
        let d = self.clusters[0].dim();
        for rec in &self.clusters {
            rec.validate()?;
            if rec.dim() != d {
                return Err(Error::Dimension(format!(
                    "cluster {} has {} covariates, expected {d}",
                    rec.id,
                    rec.dim()
                )));
            }
            if rec.size() != m {
                return Err(Error::Dimension(format!(
                    "cluster {} has {} occasions but the basis is built for {m}",
                    rec.id,
                    rec.size()
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.clusters.len()
    }

    pub fn d(&self) -> usize {
        self.clusters[0].dim()
    }

    pub fn m(&self) -> usize {
        self.basis.m()
    }

    /// Length `L * d` of the stacked score.
    pub fn score_len(&self) -> usize {
        self.basis.len() * self.d()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.weight).collect()
    }

    /// Same clusters with every weight set to one and `N = n`.
    pub fn unweighted(&self) -> Self {
        let mut out = self.clone();
        for c in &mut out.clusters {
            c.weight = 1.0;
        }
        out.population_size = out.n() as f64;
        out
    }

    pub fn with_basis(&self, basis: BasisSet) -> Result<Self> {
        Self::new(self.clusters.clone(), self.population_size, self.model, basis)
    }

    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.n() {
            return Err(Error::Dimension(format!(
                "{} weights for {} clusters",
                weights.len(),
                self.n()
            )));
        }
        let mut out = self.clone();
        for (c, &w) in out.clusters.iter_mut().zip(weights) {
            c.weight = w;
        }
        out.validate()?;
        Ok(out)
    }

    /// Submodel keeping only the listed covariate columns.
    pub fn select_covariates(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&c) = columns.iter().find(|&&c| c >= self.d()) {
            return Err(Error::Dimension(format!("column {c} out of range")));
        }
        Ok(Self {
            clusters: self.clusters.iter().map(|c| c.select_covariates(columns)).collect(),
            population_size: self.population_size,
            model: self.model,
            basis: self.basis.clone(),
        })
    }
}

/// Per-iteration record of an optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub objective: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub active_set: Vec<usize>,
    pub variance: Option<DMatrix<f64>>,
    pub trace: Vec<TraceEntry>,
    pub lambda: Option<f64>,
}

impl FitResult {
    pub fn df(&self) -> usize {
        self.active_set.len()
    }
}

pub(crate) fn active_indices(beta: &DVector<f64>, threshold: f64) -> Vec<usize> {
    (0..beta.len()).filter(|&k| beta[k].abs() >= threshold).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QifOptions {
    pub max_iter: usize,
    /// Gradient tolerance, relative to `1 + |Q_n|`.
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_halvings: usize,
}

impl Default for QifOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-6,
            step_tol: 1e-8,
            max_halvings: 30,
        }
    }
}

/// Reusable buffers for the per-cluster kernel.
struct Scratch {
    mu: Vec<f64>,
    s: Vec<f64>,
    e: Vec<f64>,
    t: Vec<f64>,
    h: Vec<f64>,
    u: Vec<f64>,
    k: Vec<f64>,
    kx: Vec<f64>,
}

impl Scratch {
    fn new(m: usize, d: usize) -> Self {
        Self {
            mu: vec![0.0; m],
            s: vec![0.0; m],
            e: vec![0.0; m],
            t: vec![0.0; m],
            h: vec![0.0; m],
            u: vec![0.0; m],
            k: vec![0.0; m * m],
            kx: vec![0.0; m * d],
        }
    }
}

/// Score of one cluster (length `L d`, block-major) and optionally its
/// Jacobian `dq_i/dbeta'` (row-major `L d x d`).
fn cluster_kernel(
    rec: &ClusterRecord,
    beta: &[f64],
    model: &MarginalModel,
    basis: &BasisSet,
    q_out: &mut [f64],
    dq_out: Option<&mut [f64]>,
    sc: &mut Scratch,
) -> Result<()> {
    let m = rec.size();
    let d = rec.dim();
    let x = rec.x.as_slice(); // column-major: x[k * m + j]
    let phi = model.dispersion;
    for j in 0..m {
        let mut eta = 0.0;
        for k in 0..d {
            eta += x[k * m + j] * beta[k];
        }
        let mu = model.mean(eta);
        let sigma2 = model.variance_fn(mu);
        let a = phi * sigma2;
        if !(a > 0.0) {
            return Err(Error::NumericDomain(format!(
                "cluster {}: variance {a} at occasion {j} is not positive",
                rec.id
            )));
        }
        let inv_sqrt_a = 1.0 / a.sqrt();
        sc.mu[j] = mu;
        sc.s[j] = sigma2 * inv_sqrt_a;
        sc.e[j] = (rec.y[j] - mu) * inv_sqrt_a;
        sc.t[j] = model.variance_slope(mu) / (2.0 * sigma2);
        sc.h[j] = sc.s[j] + sc.t[j] * sc.e[j];
    }
    let mut dq_out = dq_out;
    for (l, basis_l) in basis.bases.iter().enumerate() {
        let mm = basis_l.as_slice();
        for j in 0..m {
            let mut acc = 0.0;
            for r in 0..m {
                acc += mm[r * m + j] * sc.e[r];
            }
            sc.u[j] = acc;
        }
        let block = &mut q_out[l * d..(l + 1) * d];
        for (k, out) in block.iter_mut().enumerate() {
            let col = &x[k * m..(k + 1) * m];
            let mut acc = 0.0;
            for j in 0..m {
                acc += col[j] * sc.s[j] * sc.u[j];
            }
            *out = acc;
        }
        if let Some(dq) = dq_out.as_deref_mut() {
            // K = diag(s t u) - diag(s) M diag(h);  D_l = X' K X
            for r in 0..m {
                for j in 0..m {
                    let mut v = -sc.s[j] * mm[r * m + j] * sc.h[r];
                    if j == r {
                        v += sc.s[j] * sc.t[j] * sc.u[j];
                    }
                    sc.k[r * m + j] = v;
                }
            }
            for k2 in 0..d {
                let col = &x[k2 * m..(k2 + 1) * m];
                for j in 0..m {
                    let mut acc = 0.0;
                    for r in 0..m {
                        acc += sc.k[r * m + j] * col[r];
                    }
                    sc.kx[k2 * m + j] = acc;
                }
            }
            for k in 0..d {
                let col = &x[k * m..(k + 1) * m];
                let row = &mut dq[(l * d + k) * d..(l * d + k + 1) * d];
                for (k2, out) in row.iter_mut().enumerate() {
                    let kx = &sc.kx[k2 * m..(k2 + 1) * m];
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += col[j] * kx[j];
                    }
                    *out = acc;
                }
            }
        }
    }
    Ok(())
}

fn check_beta(sample: &SurveySample, beta: &DVector<f64>) -> Result<()> {
    if beta.len() != sample.d() {
        return Err(Error::Dimension(format!(
            "beta has length {} but the sample has {} covariates",
            beta.len(),
            sample.d()
        )));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Contract("beta has non-finite entries".into()));
    }
    Ok(())
}

fn check_weights(sample: &SurveySample, weights: &[f64]) -> Result<()> {
    if weights.len() != sample.n() {
        return Err(Error::Dimension(format!(
            "{} weights for {} clusters",
            weights.len(),
            sample.n()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Contract("weights must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Extended quasi-score `q_i(beta)` of one cluster.
pub fn cluster_score(
    rec: &ClusterRecord,
    beta: &DVector<f64>,
    model: &MarginalModel,
    basis: &BasisSet,
) -> Result<DVector<f64>> {
    if beta.len() != rec.dim() {
        return Err(Error::Dimension(format!(
            "beta has length {} but cluster {} has {} covariates",
            beta.len(),
            rec.id,
            rec.dim()
        )));
    }
    if rec.size() != basis.m() {
        return Err(Error::Dimension(format!(
            "cluster {} has {} occasions but the basis is built for {}",
            rec.id,
            rec.size(),
            basis.m()
        )));
    }
    let mut q = vec![0.0; basis.len() * rec.dim()];
    let mut sc = Scratch::new(rec.size(), rec.dim());
    cluster_kernel(rec, beta.as_slice(), model, basis, &mut q, None, &mut sc)?;
    Ok(DVector::from_vec(q))
}

/// `q_n` and `C_n` only, without derivatives.
fn score_and_covariance(
    sample: &SurveySample,
    beta: &DVector<f64>,
    weights: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_beta(sample, beta)?;
    check_weights(sample, weights)?;
    let ld = sample.score_len();
    let inv_n = 1.0 / sample.population_size;
    let mut q = vec![0.0; ld];
    let mut c = vec![0.0; ld * ld];
    let mut qi = vec![0.0; ld];
    let mut sc = Scratch::new(sample.m(), sample.d());
    for (rec, &w) in sample.clusters.iter().zip(weights) {
        cluster_kernel(rec, beta.as_slice(), &sample.model, &sample.basis, &mut qi, None, &mut sc)?;
        if w == 0.0 {
            continue;
        }
        let ww = w * inv_n;
        for a in 0..ld {
            q[a] += ww * qi[a];
            let wa = ww * qi[a];
            // lower triangle only, mirrored below
            for b in 0..=a {
                c[b * ld + a] += wa * qi[b];
            }
        }
    }
    let mut c = DMatrix::from_vec(ld, ld, c);
    c.fill_upper_triangle_with_lower_triangle();
    Ok((DVector::from_vec(q), c))
}

fn ridge_for(c: &DMatrix<f64>) -> f64 {
    RIDGE_FACTOR * c.trace() / c.nrows() as f64
}

/// `Q_n` from `q_n`, `C_n`; returns `(Q_n, C_reg^{-1} q_n, ridge)`.
fn quadratic_form(
    n: usize,
    q: &DVector<f64>,
    c: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>, DMatrix<f64>, f64)> {
    let ld = q.len();
    let trace = c.trace();
    if !trace.is_finite() {
        return Err(Error::NumericDomain("score covariance is not finite".into()));
    }
    if trace <= 0.0 {
        // every cluster score vanishes
        return Ok((0.0, DVector::zeros(ld), DMatrix::zeros(ld, ld), 0.0));
    }
    let ridge = ridge_for(c);
    let mut creg = c.clone();
    for a in 0..ld {
        creg[(a, a)] += ridge;
    }
    let ch = cholesky(creg, "regularized score covariance")?;
    let v = ch.solve(q);
    let value = n as f64 * q.dot(&v);
    if value < -1e-10 * (1.0 + q.norm_squared()) || !value.is_finite() {
        return Err(Error::NumericDomain(format!("negative quadratic inference value {value}")));
    }
    Ok((value.max(0.0), v, ch.inverse(), ridge))
}

/// Cached `q_n`, `C_n`, `D_n` and per-cluster pieces at one parameter point.
#[derive(Debug, Clone)]
pub struct QifState {
    pub beta: DVector<f64>,
    pub q: DVector<f64>,
    /// Unregularized `C_n`.
    pub c: DMatrix<f64>,
    /// Ridge `epsilon` added to the diagonal of `C_n` before inversion.
    pub ridge: f64,
    /// Inverse of `C_n + epsilon I`.
    pub c_inv: DMatrix<f64>,
    /// `D_n = dq_n / dbeta'`, `L d x d`.
    pub d: DMatrix<f64>,
    n: usize,
    value: f64,
    v: DVector<f64>,
    weights: Vec<f64>,
    inv_pop: f64,
    cluster_q: Vec<f64>,
    cluster_dq: Vec<f64>,
}

impl QifState {
    pub fn evaluate(sample: &SurveySample, beta: &DVector<f64>) -> Result<Self> {
        Self::evaluate_weighted(sample, beta, &sample.weights())
    }

    /// Evaluate with the sample's clusters but replacement weights (bootstrap).
    pub fn evaluate_weighted(sample: &SurveySample, beta: &DVector<f64>, weights: &[f64]) -> Result<Self> {
        check_beta(sample, beta)?;
        check_weights(sample, weights)?;
        let ld = sample.score_len();
        let d = sample.d();
        let n = sample.n();
        let inv_pop = 1.0 / sample.population_size;
        let mut cluster_q = vec![0.0; n * ld];
        let mut cluster_dq = vec![0.0; n * ld * d];
        let mut sc = Scratch::new(sample.m(), d);
        let mut q = DVector::zeros(ld);
        let mut c = DMatrix::zeros(ld, ld);
        let mut dmat = DMatrix::zeros(ld, d);
        for (i, (rec, &w)) in sample.clusters.iter().zip(weights).enumerate() {
            let qi = &mut cluster_q[i * ld..(i + 1) * ld];
            let dqi = &mut cluster_dq[i * ld * d..(i + 1) * ld * d];
            cluster_kernel(rec, beta.as_slice(), &sample.model, &sample.basis, qi, Some(dqi), &mut sc)?;
            if w == 0.0 {
                continue;
            }
            let ww = w * inv_pop;
            for a in 0..ld {
                let wa = ww * qi[a];
                q[a] += wa;
                for b in 0..=a {
                    c[(a, b)] += wa * qi[b];
                }
                for k in 0..d {
                    dmat[(a, k)] += ww * dqi[a * d + k];
                }
            }
        }
        c.fill_upper_triangle_with_lower_triangle();
        let (value, v, c_inv, ridge) = quadratic_form(n, &q, &c)?;
        Ok(Self {
            beta: beta.clone(),
            q,
            c,
            ridge,
            c_inv,
            d: dmat,
            n,
            value,
            v,
            weights: weights.to_vec(),
            inv_pop,
            cluster_q,
            cluster_dq,
        })
    }

    /// `Q_n(beta)`.
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn sample_size(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d.ncols()
    }

    pub fn score_len(&self) -> usize {
        self.q.len()
    }

    pub fn cluster_score(&self, i: usize) -> &[f64] {
        let ld = self.score_len();
        &self.cluster_q[i * ld..(i + 1) * ld]
    }

    fn cluster_jacobian(&self, i: usize) -> &[f64] {
        let ld = self.score_len();
        let d = self.dim();
        &self.cluster_dq[i * ld * d..(i + 1) * ld * d]
    }

    /// Column `k` of `D_n`.
    pub fn d_column(&self, k: usize) -> DVector<f64> {
        self.d.column(k).into_owned()
    }

    /// `G_n^(k) = dC_n / dbeta_k`.
    pub fn g_matrix(&self, k: usize) -> DMatrix<f64> {
        let ld = self.score_len();
        let d = self.dim();
        let mut g = DMatrix::zeros(ld, ld);
        for (i, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let ww = w * self.inv_pop;
            let qi = self.cluster_score(i);
            let dqi = self.cluster_jacobian(i);
            for a in 0..ld {
                for b in 0..ld {
                    g[(a, b)] += ww * (dqi[a * d + k] * qi[b] + qi[a] * dqi[b * d + k]);
                }
            }
        }
        g
    }

    /// Analytic gradient of `Q_n`.
    pub fn gradient(&self) -> DVector<f64> {
        let ld = self.score_len();
        let d = self.dim();
        let n = self.n as f64;
        let v = &self.v;
        // sum_i w_i (q_i'v) D_i'v   and   sum_i w_i D_i'q_i  (trace of G^(k))
        let mut corr = vec![0.0; d];
        let mut trace_g = vec![0.0; d];
        for (i, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let ww = w * self.inv_pop;
            let qi = self.cluster_score(i);
            let dqi = self.cluster_jacobian(i);
            let qv: f64 = qi.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            for k in 0..d {
                let mut dv = 0.0;
                let mut dq = 0.0;
                for a in 0..ld {
                    let dak = dqi[a * d + k];
                    dv += dak * v[a];
                    dq += dak * qi[a];
                }
                corr[k] += ww * qv * dv;
                trace_g[k] += ww * dq;
            }
        }
        let vv = v.norm_squared();
        let dtv = self.d.tr_mul(v);
        let ridge_slope = RIDGE_FACTOR / ld as f64;
        DVector::from_fn(d, |k, _| {
            let d_ridge = if self.ridge > 0.0 { ridge_slope * 2.0 * trace_g[k] } else { 0.0 };
            n * (2.0 * dtv[k] - 2.0 * corr[k] - d_ridge * vv)
        })
    }

    /// Leading Hessian term `2 n D_n' C_n^{-1} D_n`.
    pub fn hessian_lead(&self) -> DMatrix<f64> {
        let cd = &self.c_inv * &self.d;
        let mut h = self.d.tr_mul(&cd) * (2.0 * self.n as f64);
        let sym = (&h + h.transpose()) * 0.5;
        h.copy_from(&sym);
        h
    }
}

pub fn weighted_score(sample: &SurveySample, beta: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(score_and_covariance(sample, beta, &sample.weights())?.0)
}

pub fn score_covariance(sample: &SurveySample, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(score_and_covariance(sample, beta, &sample.weights())?.1)
}

pub fn qif_value(sample: &SurveySample, beta: &DVector<f64>) -> Result<f64> {
    qif_value_weighted(sample, beta, &sample.weights())
}

pub fn qif_value_weighted(sample: &SurveySample, beta: &DVector<f64>, weights: &[f64]) -> Result<f64> {
    let (q, c) = score_and_covariance(sample, beta, weights)?;
    Ok(quadratic_form(sample.n(), &q, &c)?.0)
}

pub fn qif_gradient(sample: &SurveySample, beta: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(QifState::evaluate(sample, beta)?.gradient())
}

pub fn qif_hessian_lead(sample: &SurveySample, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(QifState::evaluate(sample, beta)?.hessian_lead())
}

/// Unpenalized pseudo-QIF estimator: damped Gauss-Newton with step-halving.
pub fn fit_qif(sample: &SurveySample, init: &DVector<f64>, opts: &QifOptions) -> Result<FitResult> {
    fit_qif_weighted(sample, init, opts, &sample.weights())
}

pub fn fit_qif_weighted(
    sample: &SurveySample,
    init: &DVector<f64>,
    opts: &QifOptions,
    weights: &[f64],
) -> Result<FitResult> {
    let mut beta = init.clone();
    let mut state = QifState::evaluate_weighted(sample, &beta, weights)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut grad = state.gradient();
    for _ in 0..opts.max_iter {
        let hess = state.hessian_lead();
        let step = match solve_symmetric(&hess, &grad, "QIF Hessian") {
            Ok(s) => s,
            Err(_) => break,
        };
        let grad_ok = inf_norm(&grad) <= opts.grad_tol * (1.0 + state.value().abs());
        if grad_ok && inf_norm(&step) <= opts.step_tol {
            converged = true;
            break;
        }
        let f0 = state.value();
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &beta - &step * scale;
            if let Ok(f) = qif_value_weighted(sample, &cand, weights) {
                if f <= f0 {
                    accepted = Some((cand, f));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((cand, f)) = accepted else {
            converged = grad_ok;
            break;
        };
        let step_norm = inf_norm(&step) * scale;
        beta = cand;
        state = QifState::evaluate_weighted(sample, &beta, weights)?;
        grad = state.gradient();
        iterations += 1;
        trace.push(TraceEntry {
            objective: f,
            step_norm,
        });
        if step_norm <= opts.step_tol
            && inf_norm(&grad) <= opts.grad_tol * (1.0 + state.value().abs())
        {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        active_set: active_indices(&beta, DEFAULT_ZERO_THRESHOLD),
        objective: state.value(),
        grad_norm: inf_norm(&grad),
        beta,
        iterations,
        converged,
        variance: None,
        trace,
        lambda: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{basis_matrices, CorrelationKind, CorrelationStructure};
    use crate::model::evaluate_cluster;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis(kind: CorrelationKind, m: usize) -> BasisSet {
        basis_matrices(CorrelationStructure::new(kind, m).unwrap())
    }

    fn random_sample(rng: &mut ChaCha8Rng, n: usize, m: usize, d: usize, kind: CorrelationKind) -> SurveySample {
        let clusters = (0..n)
            .map(|i| {
                let x = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
                let y = DVector::from_fn(m, |_, _| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
                ClusterRecord::new(i.to_string(), y, x, rng.random_range(1.0..5.0)).unwrap()
            })
            .collect();
        SurveySample::new(clusters, 10.0 * n as f64, MarginalModel::default(), basis(kind, m)).unwrap()
    }

    /// Sample whose responses equal the fitted means at `beta`.
    fn zero_residual_sample(beta: &DVector<f64>, n: usize, m: usize) -> SurveySample {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MarginalModel::default();
        let clusters = (0..n)
            .map(|i| {
                let x = DMatrix::from_fn(m, beta.len(), |_, _| rng.random_range(-1.0..1.0));
                let mut rec = ClusterRecord::new(i.to_string(), DVector::zeros(m), x, 2.0).unwrap();
                rec.y = evaluate_cluster(&rec, beta, &model).unwrap().mu;
                rec
            })
            .collect();
        SurveySample::new(clusters, 4.0 * n as f64, model, basis(CorrelationKind::Exchangeable, m)).unwrap()
    }

    #[test]
    fn zero_residual_gives_zero_score_value_and_gradient() {
        let beta = DVector::from_vec(vec![0.3, -0.2]);
        let s = zero_residual_sample(&beta, 6, 4);
        let q = cluster_score(&s.clusters[0], &beta, &s.model, &s.basis).unwrap();
        assert!(q.amax() < 1e-15);
        assert_eq!(qif_value(&s, &beta).unwrap(), 0.0);
        assert!(qif_gradient(&s, &beta).unwrap().amax() < 1e-12);
    }

    #[test]
    fn independence_block_equals_gee_summand() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_sample(&mut rng, 3, 4, 3, CorrelationKind::Independence);
        let beta = DVector::from_vec(vec![0.2, -0.5, 0.1]);
        for rec in &s.clusters {
            let ev = evaluate_cluster(rec, &beta, &s.model).unwrap();
            let resid = &rec.y - &ev.mu;
            let a_inv = ev.a_diag.map(|a| 1.0 / a);
            let expected = ev.jac.transpose() * resid.component_mul(&a_inv);
            let q = cluster_score(rec, &beta, &s.model, &s.basis).unwrap();
            assert_relative_eq!(q, expected, epsilon = 1e-13);
        }
    }

    #[test]
    fn scalar_oracle_two_occasions_exchangeable() {
        // m = 2, d = 1: hand transcription of J' A^{-1/2} M_l A^{-1/2} (y - mu)
        let x1: f64 = 0.7;
        let x2: f64 = -0.4;
        let b: f64 = 0.9;
        let (y1, y2) = (1.0, 0.0);
        let mu1 = 1.0 / (1.0 + (-x1 * b).exp());
        let mu2 = 1.0 / (1.0 + (-x2 * b).exp());
        let v1 = mu1 * (1.0 - mu1);
        let v2 = mu2 * (1.0 - mu2);
        let j1 = v1 * x1;
        let j2 = v2 * x2;
        let r1 = (y1 - mu1) / v1.sqrt();
        let r2 = (y2 - mu2) / v2.sqrt();
        let block1 = j1 / v1.sqrt() * r1 + j2 / v2.sqrt() * r2;
        let block2 = j1 / v1.sqrt() * r2 + j2 / v2.sqrt() * r1;

        let rec = ClusterRecord::new(
            "c",
            DVector::from_vec(vec![y1, y2]),
            DMatrix::from_column_slice(2, 1, &[x1, x2]),
            1.0,
        )
        .unwrap();
        let q = cluster_score(&rec, &DVector::from_vec(vec![b]), &MarginalModel::default(), &basis(CorrelationKind::Exchangeable, 2))
            .unwrap();
        assert_relative_eq!(q[0], block1, epsilon = 1e-14);
        assert_relative_eq!(q[1], block2, epsilon = 1e-14);
    }

    #[test]
    fn weighted_score_scaling_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = random_sample(&mut rng, 8, 3, 2, CorrelationKind::Exchangeable);
        let beta = DVector::from_vec(vec![0.4, -0.3]);
        let pop = s.population_size;
        let n = s.n() as f64;
        for c in &mut s.clusters {
            c.weight = pop / n;
        }
        let mean: DVector<f64> = s
            .clusters
            .iter()
            .map(|c| cluster_score(c, &beta, &s.model, &s.basis).unwrap())
            .fold(DVector::zeros(4), |acc, q| acc + q)
            / n;
        assert_relative_eq!(weighted_score(&s, &beta).unwrap(), mean, epsilon = 1e-13);

        let doubled = s.with_weights(&s.weights().iter().map(|w| 2.0 * w).collect::<Vec<_>>()).unwrap();
        assert_relative_eq!(
            weighted_score(&doubled, &beta).unwrap(),
            weighted_score(&s, &beta).unwrap() * 2.0,
            epsilon = 1e-13
        );

        let single = SurveySample::new(
            vec![ClusterRecord { weight: 40.0, ..s.clusters[0].clone() }],
            40.0,
            s.model,
            s.basis.clone(),
        )
        .unwrap();
        let q1 = cluster_score(&single.clusters[0], &beta, &s.model, &s.basis).unwrap();
        assert_relative_eq!(weighted_score(&single, &beta).unwrap(), q1.clone(), epsilon = 1e-14);
        let c = score_covariance(&single, &beta).unwrap();
        assert_relative_eq!(c, &q1 * q1.transpose(), epsilon = 1e-14);
        assert!(qif_value(&single, &beta).unwrap().is_finite());
    }

    #[test]
    fn covariance_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = random_sample(&mut rng, 12, 4, 3, CorrelationKind::Ar1);
        let beta = DVector::from_vec(vec![0.1, 0.5, -0.7]);
        let scores: Vec<DVector<f64>> = s
            .clusters
            .iter()
            .map(|c| cluster_score(c, &beta, &s.model, &s.basis).unwrap())
            .collect();
        let ld = scores[0].len();
        let mut naive = DMatrix::zeros(ld, ld);
        for a in 0..ld {
            for b in 0..ld {
                let mut acc = 0.0;
                for (sc, rec) in scores.iter().zip(&s.clusters) {
                    acc += rec.weight * sc[a] * sc[b];
                }
                naive[(a, b)] = acc / s.population_size;
            }
        }
        let c = score_covariance(&s, &beta).unwrap();
        assert!((c - naive).amax() < 1e-12);
    }

    #[test]
    fn value_matches_dense_solve_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..5 {
            let s = random_sample(&mut rng, 30, 5, 3, CorrelationKind::Exchangeable);
            let beta = DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
            let q = weighted_score(&s, &beta).unwrap();
            let mut c = score_covariance(&s, &beta).unwrap();
            let eps = RIDGE_FACTOR * c.trace() / c.nrows() as f64;
            for a in 0..c.nrows() {
                c[(a, a)] += eps;
            }
            let x = c.lu().solve(&q).unwrap();
            let oracle = s.n() as f64 * x.dot(&q);
            let value = qif_value(&s, &beta).unwrap();
            assert!(value >= 0.0);
            assert_relative_eq!(value, oracle, max_relative = 1e-9);
        }
    }

    fn fd_gradient(s: &SurveySample, beta: &DVector<f64>, h: f64) -> DVector<f64> {
        DVector::from_fn(beta.len(), |k, _| {
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[k] += h;
            bm[k] -= h;
            (qif_value(s, &bp).unwrap() - qif_value(s, &bm).unwrap()) / (2.0 * h)
        })
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for kind in [CorrelationKind::Exchangeable, CorrelationKind::Ar1, CorrelationKind::Independence] {
            for _ in 0..4 {
                let s = random_sample(&mut rng, 50, 5, 4, kind);
                let beta = DVector::from_fn(4, |_, _| rng.random_range(-0.8..0.8));
                let g = qif_gradient(&s, &beta).unwrap();
                let fd = fd_gradient(&s, &beta, 1e-5);
                let err = (&g - &fd).amax() / fd.amax().max(1e-8);
                assert!(err < 1e-5, "{kind}: relative gradient error {err}");
            }
        }
    }

    #[test]
    fn g_matrix_matches_finite_differences_of_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let s = random_sample(&mut rng, 20, 4, 3, CorrelationKind::Exchangeable);
        let beta = DVector::from_vec(vec![0.3, -0.1, 0.2]);
        let st = QifState::evaluate(&s, &beta).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[k] += h;
            bm[k] -= h;
            let fd = (score_covariance(&s, &bp).unwrap() - score_covariance(&s, &bm).unwrap()) / (2.0 * h);
            let g = st.g_matrix(k);
            assert!((&g - &fd).amax() / (1.0 + g.amax()) < 1e-6);
            let dq = (weighted_score(&s, &bp).unwrap() - weighted_score(&s, &bm).unwrap()) / (2.0 * h);
            assert!((st.d_column(k) - dq).amax() < 1e-7);
        }
    }

    #[test]
    fn duplicating_clusters_preserves_scaled_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let s = random_sample(&mut rng, 25, 4, 3, CorrelationKind::Exchangeable);
        let beta = DVector::from_vec(vec![0.2, 0.2, -0.4]);
        let mut doubled = s.clone();
        doubled.clusters = s
            .clusters
            .iter()
            .chain(s.clusters.iter())
            .map(|c| ClusterRecord { weight: c.weight / 2.0, ..c.clone() })
            .collect();
        let g1 = qif_gradient(&s, &beta).unwrap() / s.n() as f64;
        let g2 = qif_gradient(&doubled, &beta).unwrap() / doubled.n() as f64;
        assert!((g1 - g2).amax() < 1e-10);
    }

    #[test]
    fn hessian_lead_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..20 {
            let s = random_sample(&mut rng, 15, 5, 4, CorrelationKind::Ar1);
            let beta = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let h = qif_hessian_lead(&s, &beta).unwrap();
            assert!((&h - h.transpose()).amax() <= 1e-12 * (1.0 + h.amax()));
            let min = h.clone().symmetric_eigen().eigenvalues.min();
            assert!(min >= -1e-10 * (1.0 + h.amax()), "min eigenvalue {min}");
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let s = random_sample(&mut rng, 20, 5, 3, CorrelationKind::Exchangeable);
        let beta = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let mut rev = s.clone();
        rev.clusters.reverse();
        let (q1, c1) = (weighted_score(&s, &beta).unwrap(), score_covariance(&s, &beta).unwrap());
        let (q2, c2) = (weighted_score(&rev, &beta).unwrap(), score_covariance(&rev, &beta).unwrap());
        assert!((q1 - q2).amax() < 1e-12);
        assert!((c1 - c2).amax() < 1e-12);
        let v1 = qif_value(&s, &beta).unwrap();
        let v2 = qif_value(&rev, &beta).unwrap();
        assert!((v1 - v2).abs() < 1e-12 * (1.0 + v1));
    }

    #[test]
    fn fit_from_optimum_takes_at_most_one_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let s = random_sample(&mut rng, 80, 5, 3, CorrelationKind::Exchangeable);
        let opts = QifOptions::default();
        let fit = fit_qif(&s, &DVector::zeros(3), &opts).unwrap();
        assert!(fit.converged);
        assert!(fit.trace.windows(2).all(|w| w[1].objective <= w[0].objective));
        let again = fit_qif(&s, &fit.beta, &opts).unwrap();
        assert!(again.converged);
        assert!(again.iterations <= 1);
        assert!((&again.beta - &fit.beta).amax() < opts.step_tol * 10.0);
    }

    #[test]
    fn scaling_weights_scales_score_but_not_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let s = random_sample(&mut rng, 60, 4, 2, CorrelationKind::Exchangeable);
        let c = 3.5;
        let scaled = s.with_weights(&s.weights().iter().map(|w| c * w).collect::<Vec<_>>()).unwrap();
        let beta = DVector::from_vec(vec![0.1, 0.1]);
        assert_relative_eq!(
            weighted_score(&scaled, &beta).unwrap(),
            weighted_score(&s, &beta).unwrap() * c,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            score_covariance(&scaled, &beta).unwrap(),
            score_covariance(&s, &beta).unwrap() * c,
            max_relative = 1e-12
        );
        let f1 = fit_qif(&s, &DVector::zeros(2), &QifOptions::default()).unwrap();
        let f2 = fit_qif(&scaled, &DVector::zeros(2), &QifOptions::default()).unwrap();
        assert!((f1.beta - f2.beta).amax() < 1e-7);
    }
}
