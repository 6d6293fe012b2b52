//! Monte Carlo campaigns: repeated population generation, PPS sampling and
//! estimation by every requested method, aggregated into table-ready cells.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;

use super::metrics::{classify_selection, compute_arb, compute_mse, robust_sd_suite, selection_rates, RobustSd, SelectionRates};
use super::population::{generate_population, PopulationConfig};
use super::sampling::draw_sample_ppswr;
use crate::correlation::{basis_matrices, CorrelationKind, CorrelationStructure};
use crate::error::{Error, Result};
use crate::gee::{fit_gee, gee_lambda_max, select_lambda_gee, GeeConfig};
use crate::penalized::{
    bootstrap_variance, lambda_max, log_grid, sandwich_variance, select_lambda, BootstrapPlan, LqaOptions,
    PenalizedFitConfig,
};
use crate::qif::{fit_qif, QifOptions, SurveySample};
use crate::rng;
use crate::scad::PenaltySpec;

/// Two-sided 95% normal quantile.
const Z_975: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Weights ignored, SCAD-penalized QIF.
    Unwgt,
    /// Survey-weighted SCAD-penalized QIF.
    Pqif,
    /// Survey-weighted SCAD-penalized GEE.
    Pgee,
    /// Weighted QIF on the true submodel.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Unwgt, Method::Pqif, Method::Pgee, Method::Oracle];

    pub fn label(self) -> &'static str {
        match self {
            Method::Unwgt => "UNWGT",
            Method::Pqif => "PQIF",
            Method::Pgee => "PGEE",
            Method::Oracle => "ORACLE",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub population: PopulationConfig,
    pub sample_sizes: Vec<usize>,
    /// Number of Monte Carlo replicates `H`.
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub correlations: Vec<CorrelationKind>,
    /// SCAD shape and zero threshold; lambda is tuned per fit.
    pub penalty: PenaltySpec,
    pub lqa: LqaOptions,
    pub qif: QifOptions,
    pub grid_size: usize,
    pub grid_ratio: f64,
    /// Bootstrap replicates per fit for the penalized QIF methods; 0 disables.
    pub bootstrap_replicates: usize,
    /// Compute sandwich standard errors for the penalized QIF methods.
    pub sandwich: bool,
    pub seed: u64,
    /// Abort when a cell loses more than this fraction of its replicates.
    pub max_failure_rate: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            population: PopulationConfig::default(),
            sample_sizes: vec![300, 500],
            replicates: 200,
            methods: Method::ALL.to_vec(),
            correlations: vec![CorrelationKind::Exchangeable, CorrelationKind::Ar1],
            penalty: PenaltySpec::default(),
            lqa: LqaOptions::default(),
            qif: QifOptions::default(),
            grid_size: crate::penalized::DEFAULT_GRID_SIZE,
            grid_ratio: crate::penalized::DEFAULT_GRID_RATIO,
            bootstrap_replicates: 200,
            sandwich: true,
            seed: 1,
            max_failure_rate: 0.2,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        self.penalty.validate()?;
        self.lqa.validate()?;
        if self.sample_sizes.is_empty() || self.sample_sizes.iter().any(|&n| n < 2) {
            return Err(Error::InvalidParameter("sample sizes must be at least 2".into()));
        }
        if self.sample_sizes.iter().any(|&n| n > self.population.size) {
            return Err(Error::InvalidParameter("sample size exceeds the population size".into()));
        }
        if self.replicates == 0 || self.methods.is_empty() || self.correlations.is_empty() {
            return Err(Error::InvalidParameter(
                "replicates, methods and correlations must be nonempty".into(),
            ));
        }
        if self.grid_size == 0 || !(self.grid_ratio > 1.0) {
            return Err(Error::InvalidParameter("grid needs at least one point and a ratio above 1".into()));
        }
        if self.bootstrap_replicates == 1 {
            return Err(Error::InvalidParameter("bootstrap needs at least two replicates".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(Error::InvalidParameter("max failure rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn support_size(&self) -> usize {
        self.population.support_size()
    }
}

/// What one method produced on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    /// Full-length estimate, zeros for dropped coefficients.
    pub beta: DVector<f64>,
    pub lambda: Option<f64>,
    /// Sandwich standard errors by coefficient (`None` when inactive or unavailable).
    pub std_errors: Option<Vec<Option<f64>>>,
    /// Bootstrap standard deviations by coefficient.
    pub bootstrap_sd: Option<Vec<Option<f64>>>,
    pub bootstrap_valid: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub sample_size: usize,
    pub method: Method,
    pub correlation: CorrelationKind,
    pub outcome: std::result::Result<MethodOutcome, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub sample_size: usize,
    pub method: Method,
    pub correlation: CorrelationKind,
    pub attempted: usize,
    pub failed: usize,
    pub selection: SelectionRates,
    pub mse: f64,
    /// Absolute relative bias (percent) of each true nonzero coefficient.
    pub arb: Vec<f64>,
    /// Robust SD summaries per true nonzero coefficient, when bootstrapped.
    pub sd: Option<Vec<RobustSd>>,
    /// Empirical coverage (percent) of 95% sandwich intervals per true nonzero coefficient.
    pub coverage: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub config: SimulationConfig,
    pub cells: Vec<CellSummary>,
    pub replicates: Vec<ReplicateRecord>,
}

impl SimulationReport {
    pub fn cell(&self, sample_size: usize, method: Method, correlation: CorrelationKind) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.sample_size == sample_size && c.method == method && c.correlation == correlation)
    }

    /// Successful outcomes of one cell, in replicate order.
    pub fn outcomes(&self, sample_size: usize, method: Method, correlation: CorrelationKind) -> Vec<&MethodOutcome> {
        self.replicates
            .iter()
            .filter(|r| r.sample_size == sample_size && r.method == method && r.correlation == correlation)
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect()
    }
}

fn per_coefficient(d: usize, active: &[usize], values: impl Fn(usize) -> f64) -> Vec<Option<f64>> {
    let mut out = vec![None; d];
    for (a, &k) in active.iter().enumerate() {
        let v = values(a);
        if v.is_finite() && v >= 0.0 {
            out[k] = Some(v.sqrt());
        }
    }
    out
}

fn penalized_qif_method(
    sample: &SurveySample,
    cfg: &SimulationConfig,
    boot_prefix: Vec<u64>,
) -> Result<MethodOutcome> {
    let unpenalized = fit_qif(sample, &DVector::zeros(sample.d()), &cfg.qif)?;
    let lmax = lambda_max(sample, &cfg.penalty, &unpenalized.beta, &cfg.lqa)?;
    let grid = log_grid(lmax, cfg.grid_size, cfg.grid_ratio);
    let pcfg = PenalizedFitConfig::new(grid, cfg.penalty, cfg.lqa)?;
    let sel = select_lambda(sample, &pcfg, &unpenalized.beta)?;
    let spec = cfg.penalty.at(sel.lambda);
    let d = sample.d();
    let fit = sel.fit;
    let std_errors = if cfg.sandwich && !fit.active_set.is_empty() {
        Some(match sandwich_variance(sample, &fit, &spec) {
            Ok(v) => per_coefficient(d, &fit.active_set, |a| v[(a, a)]),
            Err(_) => vec![None; d],
        })
    } else {
        None
    };
    let (bootstrap_sd, bootstrap_valid) = if cfg.bootstrap_replicates > 0 && !fit.active_set.is_empty() {
        let plan = BootstrapPlan::new(cfg.bootstrap_replicates, cfg.seed).with_prefix(boot_prefix);
        match bootstrap_variance(sample, &fit, &spec, &plan) {
            Ok(b) => (Some(per_coefficient(d, &fit.active_set, |a| b.variance[(a, a)])), b.valid),
            Err(_) => (Some(vec![None; d]), 0),
        }
    } else {
        (None, 0)
    };
    Ok(MethodOutcome {
        beta: fit.beta,
        lambda: Some(sel.lambda),
        std_errors,
        bootstrap_sd,
        bootstrap_valid,
    })
}

fn pgee_method(sample: &SurveySample, kind: CorrelationKind, cfg: &SimulationConfig) -> Result<MethodOutcome> {
    let gcfg = GeeConfig::new(kind);
    let plain = fit_gee(sample, &gcfg, &DVector::zeros(sample.d()))?;
    let lmax = gee_lambda_max(sample, &cfg.penalty, &gcfg, &plain.beta, &cfg.lqa)?;
    let grid = log_grid(lmax, cfg.grid_size, cfg.grid_ratio);
    let sel = select_lambda_gee(sample, &grid, &cfg.penalty, &gcfg, &plain.beta, &cfg.lqa)?;
    Ok(MethodOutcome {
        beta: sel.fit.beta,
        lambda: Some(sel.lambda),
        std_errors: None,
        bootstrap_sd: None,
        bootstrap_valid: 0,
    })
}

fn oracle_method(sample: &SurveySample, cfg: &SimulationConfig) -> Result<MethodOutcome> {
    let d1 = cfg.support_size();
    let cols: Vec<usize> = (0..d1).collect();
    let sub = sample.select_covariates(&cols)?;
    let fit = fit_qif(&sub, &DVector::zeros(d1), &cfg.qif)?;
    let mut beta = DVector::zeros(sample.d());
    beta.rows_mut(0, d1).copy_from(&fit.beta);
    Ok(MethodOutcome {
        beta,
        lambda: None,
        std_errors: None,
        bootstrap_sd: None,
        bootstrap_valid: 0,
    })
}

fn run_method(
    sample: &SurveySample,
    method: Method,
    kind: CorrelationKind,
    cfg: &SimulationConfig,
    boot_prefix: Vec<u64>,
) -> Result<MethodOutcome> {
    match method {
        Method::Unwgt => penalized_qif_method(&sample.unweighted(), cfg, boot_prefix),
        Method::Pqif => penalized_qif_method(sample, cfg, boot_prefix),
        Method::Pgee => pgee_method(sample, kind, cfg),
        Method::Oracle => oracle_method(sample, cfg),
    }
}

fn run_replicate(cfg: &SimulationConfig, h: usize) -> Vec<ReplicateRecord> {
    let mut records = Vec::new();
    let m = cfg.population.cluster_size;
    let population = generate_population(&cfg.population, &mut rng::stream(cfg.seed, &[h as u64, 0]));
    for &n in &cfg.sample_sizes {
        let ex_basis = basis_matrices(CorrelationStructure { kind: CorrelationKind::Exchangeable, m });
        let sample = population
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|pop| {
                draw_sample_ppswr(pop, n, &ex_basis, &mut rng::stream(cfg.seed, &[h as u64, 1, n as u64]))
                    .map_err(|e| e.to_string())
            });
        for (ki, &kind) in cfg.correlations.iter().enumerate() {
            let sample_k = sample
                .clone()
                .and_then(|s| s.with_basis(basis_matrices(CorrelationStructure { kind, m })).map_err(|e| e.to_string()));
            for (mi, &method) in cfg.methods.iter().enumerate() {
                let prefix = vec![h as u64, 2, n as u64, ki as u64, mi as u64];
                let outcome = sample_k
                    .as_ref()
                    .map_err(Clone::clone)
                    .and_then(|s| run_method(s, method, kind, cfg, prefix).map_err(|e| e.to_string()));
                records.push(ReplicateRecord {
                    replicate: h,
                    sample_size: n,
                    method,
                    correlation: kind,
                    outcome,
                });
            }
        }
    }
    records
}

fn summarize(cfg: &SimulationConfig, records: &[ReplicateRecord], n: usize, method: Method, kind: CorrelationKind) -> Result<CellSummary> {
    let cell: Vec<&ReplicateRecord> = records
        .iter()
        .filter(|r| r.sample_size == n && r.method == method && r.correlation == kind)
        .collect();
    let ok: Vec<&MethodOutcome> = cell.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    let attempted = cell.len();
    let failed = attempted - ok.len();
    if failed as f64 > cfg.max_failure_rate * attempted as f64 {
        return Err(Error::CampaignAborted {
            cell: format!("{method} {} n={n}", kind.short_label()),
            failed,
            attempted,
        });
    }
    let d1 = cfg.support_size();
    let beta0 = DVector::from_column_slice(&cfg.population.beta0);
    let estimates: Vec<DVector<f64>> = ok.iter().map(|o| o.beta.clone()).collect();
    let outcomes: Vec<_> = estimates.iter().map(|e| classify_selection(e, d1)).collect();
    let (mse, arb) = if estimates.is_empty() {
        (f64::NAN, vec![f64::NAN; d1])
    } else {
        (
            compute_mse(&estimates, &beta0)?,
            (0..d1).map(|k| compute_arb(&estimates, &beta0, k)).collect::<Result<Vec<_>>>()?,
        )
    };
    let sd = if ok.iter().any(|o| o.bootstrap_sd.is_some()) {
        let mut out = Vec::with_capacity(d1);
        for k in 0..d1 {
            let est: Vec<f64> = estimates.iter().map(|e| e[k]).collect();
            let boot: Vec<f64> = ok
                .iter()
                .filter_map(|o| o.bootstrap_sd.as_ref().and_then(|s| s[k]))
                .collect();
            match robust_sd_suite(&est, &boot) {
                Ok(r) => out.push(r),
                Err(_) => out.push(RobustSd {
                    sd: f64::NAN,
                    sd_m: f64::NAN,
                    sd_mad: f64::NAN,
                }),
            }
        }
        Some(out)
    } else {
        None
    };
    let with_se: Vec<&&MethodOutcome> = ok.iter().filter(|o| o.std_errors.is_some()).collect();
    let coverage = if with_se.is_empty() {
        None
    } else {
        Some(
            (0..d1)
                .map(|k| {
                    let hits = with_se
                        .iter()
                        .filter(|o| {
                            let se = o.std_errors.as_ref().and_then(|s| s[k]);
                            se.is_some_and(|se| (o.beta[k] - beta0[k]).abs() <= Z_975 * se)
                        })
                        .count();
                    100.0 * hits as f64 / with_se.len() as f64
                })
                .collect(),
        )
    };
    Ok(CellSummary {
        sample_size: n,
        method,
        correlation: kind,
        attempted,
        failed,
        selection: selection_rates(&outcomes),
        mse,
        arb,
        sd,
        coverage,
    })
}

/// Runs the full campaign. Replicates run in parallel; each derives its random
/// streams from `(seed, h)`, and results are gathered in replicate order, so the
/// report does not depend on scheduling.
pub fn run_campaign(cfg: &SimulationConfig) -> Result<SimulationReport> {
    cfg.validate()?;
    let replicates: Vec<ReplicateRecord> = (0..cfg.replicates)
        .into_par_iter()
        .map(|h| run_replicate(cfg, h))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let mut cells = Vec::new();
    for &n in &cfg.sample_sizes {
        for &method in &cfg.methods {
            for &kind in &cfg.correlations {
                cells.push(summarize(cfg, &replicates, n, method, kind)?);
            }
        }
    }
    Ok(SimulationReport {
        config: cfg.clone(),
        cells,
        replicates,
    })
}
