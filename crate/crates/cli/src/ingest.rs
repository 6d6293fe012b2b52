//! Long-format cluster data: one row per (cluster, occasion).
//!
//! Header: `cluster_id,occasion,y,weight,<covariate>...`. Covariate names are
//! taken from the header. Rows may come in any order; clusters are returned
//! sorted by id (numerically when every id is an integer) and occasions by
//! number.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use svyqif::ClusterRecord;

use crate::CliError;

const FIXED: [&str; 4] = ["cluster_id", "occasion", "y", "weight"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub covariates: Vec<String>,
    pub clusters: Vec<ClusterRecord>,
}

impl Dataset {
    /// Sum of the design weights, the default population size.
    pub fn weight_total(&self) -> f64 {
        self.clusters.iter().map(|c| c.weight).sum()
    }
}

struct Row {
    line: u64,
    occasion: usize,
    y: f64,
    weight: f64,
    x: Vec<f64>,
}

fn row_err(line: u64, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("line {line}: {msg}"))
}

pub fn read_clusters(path: &Path) -> Result<Dataset, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    parse_clusters(file)
}

pub fn parse_clusters<R: Read>(input: R) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| CliError::Data(format!("header: {e}")))?
        .clone();
    if header.len() < 5 || header.iter().zip(FIXED).any(|(h, f)| h != f) {
        return Err(row_err(
            1,
            "header must be cluster_id,occasion,y,weight followed by at least one covariate",
        ));
    }
    let covariates: Vec<String> = header.iter().skip(4).map(str::to_string).collect();
    let d = covariates.len();

    let mut groups: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            row_err(line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 + d {
            return Err(row_err(line, format!("expected {} fields, found {}", 4 + d, record.len())));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(row_err(line, "empty cluster_id"));
        }
        let occasion: usize = record[1]
            .parse()
            .ok()
            .filter(|&o| o >= 1)
            .ok_or_else(|| row_err(line, format!("occasion `{}` is not a positive integer", &record[1])))?;
        let y: f64 = match &record[2] {
            "0" => 0.0,
            "1" => 1.0,
            other => return Err(row_err(line, format!("response `{other}` is not binary (0 or 1)"))),
        };
        let weight: f64 = record[3]
            .parse()
            .map_err(|_| row_err(line, format!("weight `{}` is not a number", &record[3])))?;
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(row_err(line, format!("weight {weight} must be positive")));
        }
        let x = (0..d)
            .map(|k| {
                record[4 + k]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| row_err(line, format!("{} `{}` is not a finite number", covariates[k], &record[4 + k])))
            })
            .collect::<Result<Vec<_>, _>>()?;
        groups.entry(id).or_default().push(Row {
            line,
            occasion,
            y,
            weight,
            x,
        });
    }
    if groups.is_empty() {
        return Err(CliError::Data("no data rows".into()));
    }

    let mut ids: Vec<String> = groups.keys().cloned().collect();
    if ids.iter().all(|id| id.parse::<i64>().is_ok()) {
        ids.sort_by_key(|id| id.parse::<i64>().unwrap_or_default());
    }

    let mut m_expected: Option<(usize, String)> = None;
    let mut clusters = Vec::with_capacity(ids.len());
    for id in ids {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by_key(|r| r.occasion);
        for (j, r) in rows.iter().enumerate() {
            if r.occasion != j + 1 {
                let what = if r.occasion <= j { "duplicate" } else { "missing" };
                let occ = if r.occasion <= j { r.occasion } else { j + 1 };
                return Err(row_err(r.line, format!("cluster {id}: {what} occasion {occ}")));
            }
            if r.weight != rows[0].weight {
                return Err(row_err(
                    r.line,
                    format!("cluster {id}: weight {} differs from {} on line {}", r.weight, rows[0].weight, rows[0].line),
                ));
            }
        }
        let m = rows.len();
        match &m_expected {
            None => m_expected = Some((m, id.clone())),
            Some((m0, first)) if *m0 != m => {
                return Err(row_err(
                    rows[0].line,
                    format!("cluster {id} has {m} occasions but cluster {first} has {m0}"),
                ));
            }
            _ => {}
        }
        let y = DVector::from_iterator(m, rows.iter().map(|r| r.y));
        let x = DMatrix::from_fn(m, d, |j, k| rows[j].x[k]);
        let rec = ClusterRecord::new(id, y, x, rows[0].weight).map_err(|e| row_err(rows[0].line, e))?;
        clusters.push(rec);
    }
    Ok(Dataset { covariates, clusters })
}
