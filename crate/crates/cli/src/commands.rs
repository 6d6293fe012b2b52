//! Subcommand bodies. Each returns the report text; the binary writes it.

use std::path::Path;

use nalgebra::DVector;
use svyqif::correlation::{basis_matrices, CorrelationStructure};
use svyqif::lab::run_campaign;
use svyqif::penalized::{
    bootstrap_variance, fit_penalized, lambda_max, log_grid, sandwich_variance, select_lambda, BootstrapPlan,
    PathPoint, PenalizedFitConfig,
};
use svyqif::qif::fit_qif;
use svyqif::{FitResult, MarginalModel, PenaltySpec, SurveySample};

use crate::config::{OutputFormat, RunConfig};
use crate::ingest::{read_clusters, Dataset};
use crate::report;
use crate::CliError;

pub struct Loaded {
    pub dataset: Dataset,
    pub sample: SurveySample,
}

pub fn load(cfg: &RunConfig, data: &Path) -> Result<Loaded, CliError> {
    let dataset = read_clusters(data)?;
    let m = dataset.clusters[0].size();
    let structure = CorrelationStructure::new(cfg.correlation, m).map_err(|e| CliError::Config(e.to_string()))?;
    let population_size = cfg.population_size.unwrap_or_else(|| dataset.weight_total());
    let sample = SurveySample::new(
        dataset.clusters.clone(),
        population_size,
        MarginalModel::default(),
        basis_matrices(structure),
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(Loaded { dataset, sample })
}

/// The unpenalized QIF estimate; a fit that stalls is a numeric failure here.
fn starting_value(cfg: &RunConfig, sample: &SurveySample) -> Result<DVector<f64>, CliError> {
    let fit = fit_qif(sample, &DVector::zeros(sample.d()), &cfg.qif)?;
    if !fit.converged {
        return Err(svyqif::Error::NumericDomain(format!(
            "unpenalized QIF fit did not converge after {} iterations (gradient norm {:.3e})",
            fit.iterations, fit.grad_norm
        ))
        .into());
    }
    Ok(fit.beta)
}

fn grid(cfg: &RunConfig, sample: &SurveySample, init: &DVector<f64>) -> Result<Vec<f64>, CliError> {
    let lmax = lambda_max(sample, &cfg.penalty, init, &cfg.lqa)?;
    Ok(log_grid(lmax, cfg.grid_size, cfg.grid_ratio))
}

/// Penalized estimate at the configured lambda, or the WBIC choice over the grid.
pub fn penalized_fit(cfg: &RunConfig, sample: &SurveySample) -> Result<(FitResult, PenaltySpec), CliError> {
    let init = starting_value(cfg, sample)?;
    match cfg.lambda {
        Some(lambda) => {
            let spec = cfg.penalty.at(lambda);
            Ok((fit_penalized(sample, &spec, &init, &cfg.lqa)?, spec))
        }
        None => {
            let pcfg = PenalizedFitConfig::new(grid(cfg, sample, &init)?, cfg.penalty, cfg.lqa)?;
            let sel = select_lambda(sample, &pcfg, &init)?;
            Ok((sel.fit, cfg.penalty.at(sel.lambda)))
        }
    }
}

fn standard_errors(sample: &SurveySample, fit: &FitResult, spec: &PenaltySpec) -> Result<Vec<Option<f64>>, CliError> {
    let mut se = vec![None; sample.d()];
    if fit.active_set.is_empty() {
        return Ok(se);
    }
    let v = sandwich_variance(sample, fit, spec)?;
    for (a, &k) in fit.active_set.iter().enumerate() {
        se[k] = Some(v[(a, a)].max(0.0).sqrt());
    }
    Ok(se)
}

pub fn fit(cfg: &RunConfig, data: &Path) -> Result<String, CliError> {
    let loaded = load(cfg, data)?;
    let (fit, spec) = penalized_fit(cfg, &loaded.sample)?;
    let se = standard_errors(&loaded.sample, &fit, &spec)?;
    Ok(report::fit_csv(&loaded.dataset.covariates, &fit, &se))
}

pub fn bootstrap(cfg: &RunConfig, data: &Path) -> Result<String, CliError> {
    let seed = cfg.require_seed()?;
    if cfg.bootstrap_replicates < 2 {
        return Err(CliError::Config("[bootstrap] replicates must be at least 2".into()));
    }
    let loaded = load(cfg, data)?;
    let (fit, spec) = penalized_fit(cfg, &loaded.sample)?;
    let se = standard_errors(&loaded.sample, &fit, &spec)?;
    let mut sd = vec![None; loaded.sample.d()];
    let mut valid = 0;
    if !fit.active_set.is_empty() {
        let plan = BootstrapPlan::new(cfg.bootstrap_replicates, seed);
        let summary = bootstrap_variance(&loaded.sample, &fit, &spec, &plan)?;
        valid = summary.valid;
        for (a, &k) in fit.active_set.iter().enumerate() {
            sd[k] = Some(summary.variance[(a, a)].max(0.0).sqrt());
        }
    }
    Ok(report::bootstrap_csv(&loaded.dataset.covariates, &fit, &se, &sd, valid))
}

pub fn lambda_path(cfg: &RunConfig, data: &Path) -> Result<String, CliError> {
    let loaded = load(cfg, data)?;
    let path = path_points(cfg, &loaded.sample)?;
    Ok(report::lambda_path_csv(&loaded.dataset.covariates, &path))
}

pub fn path_points(cfg: &RunConfig, sample: &SurveySample) -> Result<Vec<PathPoint>, CliError> {
    let init = starting_value(cfg, sample)?;
    let pcfg = PenalizedFitConfig::new(grid(cfg, sample, &init)?, cfg.penalty, cfg.lqa)?;
    Ok(select_lambda(sample, &pcfg, &init)?.path)
}

pub fn simulate(cfg: &RunConfig) -> Result<String, CliError> {
    cfg.require_seed()?;
    let report = run_campaign(&cfg.simulation)?;
    Ok(match cfg.format {
        OutputFormat::Csv => report::simulation_csv(&report),
        OutputFormat::Markdown => report::simulation_markdown(&report),
    })
}
