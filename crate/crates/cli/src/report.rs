//! CSV and markdown writers. Every writer renders to a `String` first so the
//! bytes depend only on the report.

use std::fmt::Write as _;
use std::path::Path;

use svyqif::lab::{CellSummary, SimulationReport};
use svyqif::penalized::PathPoint;
use svyqif::FitResult;

use crate::CliError;

pub const FIT_HEADER: &str = "index,name,estimate,std_error,active";
pub const BOOTSTRAP_HEADER: &str = "index,name,estimate,std_error,bootstrap_sd,bootstrap_valid,active";
pub const SIMULATION_HEADER: &str = "sample_size,method,correlation,metric,coefficient,value";

/// Twelve significant digits in scientific notation; empty for `None`.
pub fn sig12(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.11e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(sig12).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn fit_csv(names: &[String], fit: &FitResult, std_errors: &[Option<f64>]) -> String {
    let mut out = String::from(FIT_HEADER);
    out.push('\n');
    for (k, name) in names.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            k + 1,
            csv_field(name),
            sig12(fit.beta[k]),
            opt(std_errors[k]),
            u8::from(fit.active_set.contains(&k))
        );
    }
    out
}

pub fn bootstrap_csv(
    names: &[String],
    fit: &FitResult,
    std_errors: &[Option<f64>],
    bootstrap_sd: &[Option<f64>],
    valid: usize,
) -> String {
    let mut out = String::from(BOOTSTRAP_HEADER);
    out.push('\n');
    for (k, name) in names.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            k + 1,
            csv_field(name),
            sig12(fit.beta[k]),
            opt(std_errors[k]),
            opt(bootstrap_sd[k]),
            valid,
            u8::from(fit.active_set.contains(&k))
        );
    }
    out
}

pub fn lambda_path_csv(names: &[String], path: &[PathPoint]) -> String {
    let mut out = String::from("lambda,wbic,qif,df");
    for name in names {
        out.push(',');
        out.push_str(&csv_field(&format!("beta_{name}")));
    }
    out.push('\n');
    for p in path {
        let _ = write!(out, "{},{}", sig12(p.lambda), sig12(p.wbic));
        match &p.fit {
            Some(f) => {
                let _ = write!(out, ",{},{}", sig12(f.objective), f.df());
                for b in f.beta.iter() {
                    let _ = write!(out, ",{}", sig12(*b));
                }
            }
            None => {
                out.push_str(",,");
                for _ in names {
                    out.push(',');
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Long format: one row per (cell, metric, coefficient).
pub fn simulation_csv(report: &SimulationReport) -> String {
    let mut out = String::from(SIMULATION_HEADER);
    out.push('\n');
    for c in &report.cells {
        let mut row = |metric: &str, coef: Option<usize>, value: f64| {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.sample_size,
                c.method,
                c.correlation.short_label(),
                metric,
                coef.map(|k| (k + 1).to_string()).unwrap_or_default(),
                sig12(value)
            );
        };
        row("attempted", None, c.attempted as f64);
        row("failed", None, c.failed as f64);
        row("C", None, c.selection.correct);
        row("O", None, c.selection.over);
        row("U", None, c.selection.under);
        row("MSE", None, c.mse);
        for (k, v) in c.arb.iter().enumerate() {
            row("ARB", Some(k), *v);
        }
        if let Some(sd) = &c.sd {
            for (k, s) in sd.iter().enumerate() {
                row("SD", Some(k), s.sd);
                row("SD_m", Some(k), s.sd_m);
                row("SD_mad", Some(k), s.sd_mad);
            }
        }
        if let Some(cov) = &c.coverage {
            for (k, v) in cov.iter().enumerate() {
                row("coverage", Some(k), *v);
            }
        }
    }
    out
}

fn fixed(x: f64, digits: usize) -> String {
    if x.is_finite() {
        format!("{x:.digits$}")
    } else {
        "-".into()
    }
}

/// Selection and MSE table, then ARB, bootstrap SD and coverage tables
/// when the campaign produced them.
pub fn simulation_markdown(report: &SimulationReport) -> String {
    let cfg = &report.config;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# Simulation summary\n\nN = {}, H = {}, seed = {}\n",
        cfg.population.size, cfg.replicates, cfg.seed
    );

    out.push_str("## Model selection\n\n| n | Method |");
    for kind in &cfg.correlations {
        let l = kind.short_label();
        let _ = write!(out, " {l} C | {l} O | {l} U | {l} MSE |");
    }
    out.push_str("\n|---|---|");
    for _ in &cfg.correlations {
        out.push_str("---:|---:|---:|---:|");
    }
    out.push('\n');
    for &n in &cfg.sample_sizes {
        for &method in &cfg.methods {
            let _ = write!(out, "| {n} | {method} |");
            for &kind in &cfg.correlations {
                match report.cell(n, method, kind) {
                    Some(c) => {
                        let _ = write!(
                            out,
                            " {} | {} | {} | {} |",
                            fixed(c.selection.correct, 1),
                            fixed(c.selection.over, 1),
                            fixed(c.selection.under, 1),
                            fixed(c.mse, 3)
                        );
                    }
                    None => out.push_str(" - | - | - | - |"),
                }
            }
            out.push('\n');
        }
    }

    let d1 = cfg.support_size();
    let coef_header = |out: &mut String, lead: &str| {
        let _ = write!(out, "| n | Method | Correlation |{lead}");
        for k in 1..=d1 {
            let _ = write!(out, " beta{k} |");
        }
        out.push_str("\n|---|---|---|");
        for _ in lead.matches('|') {
            out.push_str("---|");
        }
        for _ in 0..d1 {
            out.push_str("---:|");
        }
        out.push('\n');
    };
    let cell_prefix = |c: &CellSummary| format!("| {} | {} | {} |", c.sample_size, c.method, c.correlation.short_label());

    out.push_str("\n## Absolute relative bias (%)\n\n");
    coef_header(&mut out, "");
    for c in &report.cells {
        out.push_str(&cell_prefix(c));
        for v in &c.arb {
            let _ = write!(out, " {} |", fixed(*v, 1));
        }
        out.push('\n');
    }

    if report.cells.iter().any(|c| c.sd.is_some()) {
        out.push_str("\n## Bootstrap standard deviations (SD / SD_m / SD_mad)\n\n");
        coef_header(&mut out, "");
        for c in report.cells.iter().filter(|c| c.sd.is_some()) {
            out.push_str(&cell_prefix(c));
            for s in c.sd.iter().flatten() {
                let _ = write!(out, " {} / {} / {} |", fixed(s.sd, 3), fixed(s.sd_m, 3), fixed(s.sd_mad, 3));
            }
            out.push('\n');
        }
    }

    if report.cells.iter().any(|c| c.coverage.is_some()) {
        out.push_str("\n## Sandwich 95% interval coverage (%)\n\n");
        coef_header(&mut out, "");
        for c in report.cells.iter().filter(|c| c.coverage.is_some()) {
            out.push_str(&cell_prefix(c));
            for v in c.coverage.iter().flatten() {
                let _ = write!(out, " {} |", fixed(*v, 1));
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}
