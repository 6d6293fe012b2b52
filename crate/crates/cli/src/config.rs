//! INI-style run configuration.
//!
//! The file is a list of `[section]` headers followed by `key = value` lines.
//! Blank lines and lines starting with `#` or `;` are ignored. Lists are
//! comma-separated. Every key is optional; unknown sections and keys, duplicate
//! keys and malformed values are rejected with the offending line number.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use svyqif::gee::GeeConfig;
use svyqif::lab::{Method, PopulationConfig, SimulationConfig};
use svyqif::penalized::{LqaOptions, DEFAULT_GRID_RATIO, DEFAULT_GRID_SIZE};
use svyqif::scad::{DEFAULT_A, DEFAULT_ZERO_THRESHOLD};
use svyqif::{CorrelationKind, PenaltySpec, QifOptions};

use crate::CliError;

/// Documented schema: section name and its keys.
pub const SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["seed"]),
    ("model", &["correlation"]),
    ("penalty", &["a", "zero_threshold", "lambda", "grid_size", "grid_ratio"]),
    (
        "solver",
        &["max_iter", "grad_tol", "step_tol", "max_halvings", "lqa_max_outer", "lqa_tol"],
    ),
    (
        "population",
        &["size", "cluster_size", "beta0", "alpha", "covariate_min", "covariate_max"],
    ),
    (
        "simulation",
        &["sample_sizes", "replicates", "methods", "correlations", "sandwich", "max_failure_rate"],
    ),
    ("bootstrap", &["replicates"]),
    ("data", &["population_size"]),
    ("output", &["format"]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Markdown,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "markdown" | "md" => Ok(OutputFormat::Markdown),
            other => Err(format!("unknown output format `{other}` (expected csv or markdown)")),
        }
    }
}

/// A parsed value together with the line it came from.
#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Raw `section.key -> value` map with line numbers.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<(String, String), Entry>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries: BTreeMap<(String, String), Entry> = BTreeMap::new();
        let mut section: Option<&str> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| config_err(line, "unterminated section header"))?
                    .trim();
                let known = SCHEMA
                    .iter()
                    .find(|(s, _)| *s == name)
                    .ok_or_else(|| config_err(line, format!("unknown section [{name}]")))?;
                section = Some(known.0);
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| config_err(line, "expected `key = value`"))?;
            let key = key.trim();
            let value = value.trim();
            let sec = section.ok_or_else(|| config_err(line, format!("key `{key}` appears before any section")))?;
            let keys = SCHEMA.iter().find(|(s, _)| *s == sec).map(|(_, k)| *k).unwrap_or(&[]);
            if !keys.contains(&key) {
                return Err(config_err(line, format!("unknown key `{sec}.{key}`")));
            }
            if value.is_empty() {
                return Err(config_err(line, format!("`{sec}.{key}` has no value")));
            }
            let slot = (sec.to_string(), key.to_string());
            if let Some(prev) = entries.get(&slot) {
                return Err(config_err(
                    line,
                    format!("duplicate key `{sec}.{key}` (first set on line {})", prev.line),
                ));
            }
            entries.insert(
                slot,
                Entry {
                    value: value.to_string(),
                    line,
                },
            );
        }
        Ok(Self { entries })
    }

    fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        match self.entries.get(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(Some)
                .map_err(|err| config_err(e.line, format!("`{section}.{key}`: {err}"))),
        }
    }

    fn get_list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: fmt::Display,
    {
        match self.entries.get(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some(e) => e
                .value
                .split(',')
                .map(|item| {
                    item.trim()
                        .parse::<T>()
                        .map_err(|err| config_err(e.line, format!("`{section}.{key}`: {err}")))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }

    fn line_of(&self, section: &str, key: &str) -> usize {
        self.entries
            .get(&(section.to_string(), key.to_string()))
            .map_or(0, |e| e.line)
    }
}

fn config_err(line: usize, msg: impl fmt::Display) -> CliError {
    CliError::Config(format!("line {line}: {msg}"))
}

/// Fully validated configuration with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub correlation: CorrelationKind,
    pub penalty: PenaltySpec,
    /// Fixed tuning parameter for `fit`/`bootstrap`; tuned by WBIC when absent.
    pub lambda: Option<f64>,
    pub grid_size: usize,
    pub grid_ratio: f64,
    pub qif: QifOptions,
    pub lqa: LqaOptions,
    pub simulation: SimulationConfig,
    pub bootstrap_replicates: usize,
    pub population_size: Option<f64>,
    pub format: OutputFormat,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    /// The GEE configuration matching the model section.
    pub fn gee(&self) -> GeeConfig {
        GeeConfig::new(self.correlation)
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("[run] seed is required for this command".into()))
    }
}

impl FromStr for RunConfig {
    type Err = CliError;

    fn from_str(text: &str) -> Result<Self, CliError> {
        let raw = RawConfig::parse(text)?;
        let seed = raw.get::<u64>("run", "seed")?;
        let correlation = raw
            .get::<CorrelationKind>("model", "correlation")?
            .unwrap_or(CorrelationKind::Exchangeable);

        let a = raw.get::<f64>("penalty", "a")?.unwrap_or(DEFAULT_A);
        let zero_threshold = raw
            .get::<f64>("penalty", "zero_threshold")?
            .unwrap_or(DEFAULT_ZERO_THRESHOLD);
        let lambda = raw.get::<f64>("penalty", "lambda")?;
        let penalty = PenaltySpec::new(lambda.unwrap_or(0.0), a, zero_threshold).map_err(|e| {
            let line = if lambda.is_some_and(|l| !(l >= 0.0)) {
                raw.line_of("penalty", "lambda")
            } else if !(a > 2.0) {
                raw.line_of("penalty", "a")
            } else {
                raw.line_of("penalty", "zero_threshold")
            };
            config_err(line, e)
        })?;
        let grid_size = raw.get::<usize>("penalty", "grid_size")?.unwrap_or(DEFAULT_GRID_SIZE);
        let grid_ratio = raw.get::<f64>("penalty", "grid_ratio")?.unwrap_or(DEFAULT_GRID_RATIO);
        if grid_size == 0 {
            return Err(config_err(raw.line_of("penalty", "grid_size"), "grid_size must be positive"));
        }
        if !(grid_ratio > 1.0) {
            return Err(config_err(raw.line_of("penalty", "grid_ratio"), "grid_ratio must exceed 1"));
        }

        let qd = QifOptions::default();
        let qif = QifOptions {
            max_iter: raw.get("solver", "max_iter")?.unwrap_or(qd.max_iter),
            grad_tol: raw.get("solver", "grad_tol")?.unwrap_or(qd.grad_tol),
            step_tol: raw.get("solver", "step_tol")?.unwrap_or(qd.step_tol),
            max_halvings: raw.get("solver", "max_halvings")?.unwrap_or(qd.max_halvings),
        };
        if qif.max_iter == 0 || !(qif.grad_tol > 0.0) || !(qif.step_tol > 0.0) {
            return Err(CliError::Config(
                "[solver] iteration counts and tolerances must be positive".into(),
            ));
        }
        let ld = LqaOptions::default();
        let lqa = LqaOptions {
            max_outer: raw.get("solver", "lqa_max_outer")?.unwrap_or(ld.max_outer),
            tol: raw.get("solver", "lqa_tol")?.unwrap_or(ld.tol),
            max_halvings: qif.max_halvings,
        };
        lqa.validate().map_err(|e| CliError::Config(format!("[solver] {e}")))?;

        let pd = PopulationConfig::default();
        let population = PopulationConfig {
            size: raw.get("population", "size")?.unwrap_or(pd.size),
            cluster_size: raw.get("population", "cluster_size")?.unwrap_or(pd.cluster_size),
            beta0: raw.get_list("population", "beta0")?.unwrap_or(pd.beta0),
            alpha_true: raw.get("population", "alpha")?.unwrap_or(pd.alpha_true),
            covariate_range: (
                raw.get("population", "covariate_min")?.unwrap_or(pd.covariate_range.0),
                raw.get("population", "covariate_max")?.unwrap_or(pd.covariate_range.1),
            ),
        };

        let sd = SimulationConfig::default();
        let bootstrap_replicates = raw.get::<usize>("bootstrap", "replicates")?.unwrap_or(sd.bootstrap_replicates);
        if bootstrap_replicates == 1 {
            return Err(config_err(
                raw.line_of("bootstrap", "replicates"),
                "bootstrap needs 0 (disabled) or at least 2 replicates",
            ));
        }
        let simulation = SimulationConfig {
            population,
            sample_sizes: raw.get_list("simulation", "sample_sizes")?.unwrap_or(sd.sample_sizes),
            replicates: raw.get("simulation", "replicates")?.unwrap_or(sd.replicates),
            methods: raw.get_list::<Method>("simulation", "methods")?.unwrap_or(sd.methods),
            correlations: raw
                .get_list::<CorrelationKind>("simulation", "correlations")?
                .unwrap_or(sd.correlations),
            penalty: PenaltySpec { lambda: 0.0, ..penalty },
            lqa,
            qif,
            grid_size,
            grid_ratio,
            bootstrap_replicates,
            sandwich: raw.get("simulation", "sandwich")?.unwrap_or(sd.sandwich),
            seed: seed.unwrap_or(sd.seed),
            max_failure_rate: raw.get("simulation", "max_failure_rate")?.unwrap_or(sd.max_failure_rate),
        };
        simulation
            .validate()
            .map_err(|e| CliError::Config(format!("[simulation]/[population] {e}")))?;

        let population_size = raw.get::<f64>("data", "population_size")?;
        if population_size.is_some_and(|n| !(n > 0.0 && n.is_finite())) {
            return Err(config_err(
                raw.line_of("data", "population_size"),
                "population_size must be positive",
            ));
        }
        let format = raw.get::<OutputFormat>("output", "format")?.unwrap_or(OutputFormat::Csv);

        Ok(Self {
            seed,
            correlation,
            penalty,
            lambda,
            grid_size,
            grid_ratio,
            qif,
            lqa,
            simulation,
            bootstrap_replicates,
            population_size,
            format,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_only_fills_defaults() {
        let cfg: RunConfig = "[run]\nseed = 7\n".parse().unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.penalty.a, 3.7);
        assert_eq!(cfg.penalty.zero_threshold, 0.001);
        assert_eq!(cfg.grid_size, 25);
        assert_eq!(cfg.simulation.seed, 7);
        assert_eq!(cfg.simulation.sample_sizes, vec![300, 500]);
        assert_eq!(cfg.simulation.population.beta0.len(), 10);
        assert_eq!(cfg.format, OutputFormat::Csv);
    }

    #[test]
    fn small_a_is_rejected_with_line() {
        let err = "[run]\nseed = 1\n[penalty]\na = 1.5\n".parse::<RunConfig>().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn duplicate_and_unknown_keys() {
        let err = "[run]\nseed = 1\nseed = 2\n".parse::<RunConfig>().unwrap_err();
        assert!(err.to_string().contains("line 3"));
        assert!(err.to_string().contains("line 2"));
        let err = "[run]\nsed = 1\n".parse::<RunConfig>().unwrap_err();
        assert!(err.to_string().contains("unknown key"));
        let err = "[runner]\n".parse::<RunConfig>().unwrap_err();
        assert!(err.to_string().contains("unknown section"));
        assert!("seed = 1\n".parse::<RunConfig>().is_err());
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let values = |sec: &str, key: &str| -> &'static str {
            match (sec, key) {
                ("model", _) => "ar1",
                ("penalty", "lambda") => "0.1",
                ("population", "beta0") => "0.8, -0.7, 0, 0",
                ("population", "covariate_min") => "0",
                ("population", "alpha") => "0.3",
                ("population", "size") => "2000",
                ("simulation", "sample_sizes") => "100, 200",
                ("simulation", "methods") => "PQIF, ORACLE",
                ("simulation", "correlations") => "exchangeable",
                ("simulation", "sandwich") => "false",
                ("simulation", "max_failure_rate") => "0.5",
                ("data", _) => "5000",
                ("output", _) => "markdown",
                ("penalty", "a") => "3.7",
                (_, k) if k.contains("tol") || k == "zero_threshold" || k == "covariate_max" => "0.5",
                _ => "5",
            }
        };
        let mut text = String::new();
        for (sec, keys) in SCHEMA {
            text.push_str(&format!("[{sec}]\n"));
            for key in *keys {
                text.push_str(&format!("{key} = {}\n", values(sec, key)));
            }
        }
        let cfg: RunConfig = text.parse().unwrap();
        assert_eq!(cfg.correlation, CorrelationKind::Ar1);
        assert_eq!(cfg.lambda, Some(0.1));
        assert_eq!(cfg.simulation.methods, vec![Method::Pqif, Method::Oracle]);
        assert_eq!(cfg.population_size, Some(5000.0));
        assert_eq!(cfg.format, OutputFormat::Markdown);
    }

    #[test]
    fn malformed_values_name_the_key() {
        let err = "[simulation]\nreplicates = many\n".parse::<RunConfig>().unwrap_err();
        assert!(err.to_string().contains("simulation.replicates"));
        let err = "[output]\nformat = pdf\n".parse::<RunConfig>().unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }
}
