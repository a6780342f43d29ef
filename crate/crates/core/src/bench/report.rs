use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::{ConsistencyReport, FidelityReport};
use super::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    LambdaFiber,
    Gamma,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::LambdaFiber => "lambda_fiber",
            SweepAxis::Gamma => "gamma",
        }
    }
}

/// Outcome of one benchmark cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub method: String,
    pub fidelity: FidelityReport,
    pub consistency: ConsistencyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub fiber_mean: f64,
    pub fiber_median: f64,
    pub fiber_std: f64,
    pub nn_median: f64,
    pub win_rate: f64,
    pub kl: [f64; 3],
    pub kl_sum: f64,
    pub w2: [f64; 3],
    pub samples: usize,
    pub low_sample_warning: bool,
}

impl ReportRow {
    pub fn from_cell(axis: &str, value: f64, seed: u64, cell: &CellResult) -> Self {
        let f = &cell.fidelity;
        let c = &cell.consistency;
        Self {
            method: cell.method.clone(),
            axis: axis.into(),
            value,
            seed,
            ok: true,
            error: None,
            fiber_mean: f.method.mean,
            fiber_median: f.method.median,
            fiber_std: f.method.std,
            nn_median: f.baseline.median,
            win_rate: f.win_rate(),
            kl: c.kl,
            kl_sum: c.kl_sum,
            w2: c.w2,
            samples: c.n,
            low_sample_warning: c.low_sample_warning,
        }
    }

    pub fn failed(method: &str, axis: &str, value: f64, seed: u64, error: String) -> Self {
        Self {
            method: method.into(),
            axis: axis.into(),
            value,
            seed,
            ok: false,
            error: Some(error),
            fiber_mean: f64::NAN,
            fiber_median: f64::NAN,
            fiber_std: f64::NAN,
            nn_median: f64::NAN,
            win_rate: f64::NAN,
            kl: [f64::NAN; 3],
            kl_sum: f64::NAN,
            w2: [f64::NAN; 3],
            samples: 0,
            low_sample_warning: false,
        }
    }
}

/// Rows of a benchmark run with the provenance every output carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config_hash: String,
    pub seed: u64,
    /// `dim x − rank(Dphi)` at a benchmark image, when computed.
    pub ambient_fiber_dimension: Option<usize>,
    /// Dimension of the data-supported fiber (the background color).
    pub data_fiber_dimension: usize,
    pub rank_tol: f64,
    pub kl_estimator: String,
    pub rows: Vec<ReportRow>,
}

const CSV_HEADER: &str = "method,axis,value,seed,ok,fiber_mean,fiber_median,fiber_std,nn_median,win_rate,\
kl_r,kl_g,kl_b,kl_sum,w2_r,w2_g,w2_b,samples,low_sample_warning,error,config_hash";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl BenchmarkReport {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            ambient_fiber_dimension: None,
            data_fiber_dimension: 3,
            rank_tol: 1e-8,
            kl_estimator: "per-channel histogram KL, 64 bins on [0,1), smoothing 1e-8; kl_sum adds channels".into(),
            rows: Vec::new(),
        }
    }

    pub fn successes(&self) -> usize {
        self.rows.iter().filter(|r| r.ok).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CSV_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.6},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{},{}",
                csv_field(&r.method),
                r.axis,
                r.value,
                r.seed,
                r.ok,
                r.fiber_mean,
                r.fiber_median,
                r.fiber_std,
                r.nn_median,
                r.win_rate,
                r.kl[0],
                r.kl[1],
                r.kl[2],
                r.kl_sum,
                r.w2[0],
                r.w2[1],
                r.w2[2],
                r.samples,
                r.low_sample_warning,
                csv_field(r.error.as_deref().unwrap_or("")),
                self.config_hash
            )
            .unwrap();
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Two-column `fiber_median  kl_sum` TSV per method, rows in report order.
    pub fn pareto_tsv(&self) -> Vec<(String, String)> {
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        methods
            .into_iter()
            .map(|m| {
                let mut s = format!("# config_hash={} seed={}\nfiber_loss\tkl_sum\n", self.config_hash, self.seed);
                for r in self.rows.iter().filter(|r| r.ok && r.method == m) {
                    writeln!(s, "{:.9e}\t{:.9e}", r.fiber_median, r.kl_sum).unwrap();
                }
                (m.to_string(), s)
            })
            .collect()
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.pareto.<method>.tsv`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>, BenchError> {
        std::fs::create_dir_all(dir).map_err(|e| BenchError::Io(format!("{}: {e}", dir.display())))?;
        let mut files = vec![
            (dir.join(format!("{stem}.csv")), self.to_csv()),
            (dir.join(format!("{stem}.json")), self.to_json()),
        ];
        for (m, tsv) in self.pareto_tsv() {
            let safe: String = m.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
            files.push((dir.join(format!("{stem}.pareto.{safe}.tsv")), tsv));
        }
        for (p, body) in &files {
            std::fs::write(p, body).map_err(|e| BenchError::Io(format!("{}: {e}", p.display())))?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

/// Runs `cell(value, seed)` for every pair and collects one row each; a
/// failing cell becomes a failed row and the sweep continues.
pub fn run_sweep<F>(
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    method: &str,
    report: &mut BenchmarkReport,
    cell: F,
) -> Result<(), BenchError>
where
    F: Fn(f64, u64) -> Result<CellResult, BenchError>,
{
    if values.is_empty() || seeds.is_empty() {
        return Err(BenchError::Config(format!("sweep over {} needs values and seeds", axis.label())));
    }
    for &v in values {
        for &s in seeds {
            let row = match cell(v, s) {
                Ok(c) => ReportRow::from_cell(axis.label(), v, s, &c),
                Err(e) => ReportRow::failed(method, axis.label(), v, s, e.to_string()),
            };
            report.rows.push(row);
        }
    }
    Ok(())
}

/// Median over seeds of the median fiber loss for each value, in `values` order.
pub fn median_by_value(report: &BenchmarkReport, method: &str, values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let m: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.ok && r.method == method && r.value == v)
                .map(|r| r.fiber_median)
                .collect();
            super::eval::median(&m)
        })
        .collect()
}
