//! Evaluation reports: per-point rows, aggregates, CSV and sidecar files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Exact densities below this are left out of relative-error aggregates.
pub const DENSITY_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    /// Swept coordinates only.
    pub point: Vec<f64>,
    pub t: f64,
    pub p_exact: Option<f64>,
    pub p_net: Option<f64>,
    pub p_ode: Option<f64>,
    /// Empty when the point evaluated cleanly.
    pub status: String,
}

impl EvalRow {
    fn errors(&self, pred: Option<f64>) -> (Option<f64>, Option<f64>) {
        match (pred, self.p_exact) {
            (Some(p), Some(e)) => {
                let abs = (p - e).abs();
                (Some(abs), (e > DENSITY_FLOOR).then(|| abs / e.abs()))
            }
            _ => (None, None),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Points entering the relative-error statistics.
    pub count: usize,
    /// Mean relative error, in percent.
    pub mape: f64,
    pub mean_rel: f64,
    pub max_rel: f64,
    /// Mean squared difference of log-densities.
    pub mse_log: f64,
}

impl Aggregates {
    fn from_pairs(pairs: impl Iterator<Item = (f64, f64)>) -> Option<Self> {
        let (mut n, mut sum_rel, mut max_rel, mut sum_log) = (0usize, 0.0, 0.0f64, 0.0);
        for (pred, exact) in pairs {
            if exact <= DENSITY_FLOOR {
                continue;
            }
            let rel = (pred - exact).abs() / exact;
            n += 1;
            sum_rel += rel;
            max_rel = max_rel.max(rel);
            let dl = pred.ln() - exact.ln();
            sum_log += dl * dl;
        }
        (n > 0).then(|| Aggregates {
            count: n,
            mape: 100.0 * sum_rel / n as f64,
            mean_rel: sum_rel / n as f64,
            max_rel,
            mse_log: sum_log / n as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub axes: Vec<usize>,
    pub rows: Vec<EvalRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReportSummary {
    pub points: usize,
    pub flagged: usize,
    pub net: Option<Aggregates>,
    pub ode: Option<Aggregates>,
}

impl EvalReport {
    pub fn aggregates_net(&self) -> Option<Aggregates> {
        Aggregates::from_pairs(self.rows.iter().filter_map(|r| Some((r.p_net?, r.p_exact?))))
    }

    pub fn aggregates_ode(&self) -> Option<Aggregates> {
        Aggregates::from_pairs(self.rows.iter().filter_map(|r| Some((r.p_ode?, r.p_exact?))))
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            points: self.rows.len(),
            flagged: self.rows.iter().filter(|r| !r.status.is_empty()).count(),
            net: self.aggregates_net(),
            ode: self.aggregates_ode(),
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = self.axes.iter().map(|a| format!("x{a}")).collect();
        h.extend(
            [
                "t",
                "p_exact",
                "p_net",
                "p_ode",
                "abs_err_net",
                "rel_err_net",
                "abs_err_ode",
                "rel_err_ode",
                "status",
            ]
            .map(String::from),
        );
        h
    }

    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let (an, rn) = r.errors(r.p_net);
            let (ao, ro) = r.errors(r.p_ode);
            let mut rec: Vec<String> = r.point.iter().map(|v| v.to_string()).collect();
            rec.push(r.t.to_string());
            rec.extend([r.p_exact, r.p_net, r.p_ode, an, rn, ao, ro].map(opt));
            rec.push(r.status.clone());
            w.write_record(rec)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Reads back the output of [`EvalReport::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, CliError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        let axes: Vec<usize> = header
            .iter()
            .take_while(|h| h.starts_with('x'))
            .map(|h| h[1..].parse().map_err(|_| CliError::Config(format!("bad column `{h}`"))))
            .collect::<Result<_, _>>()?;
        let k = axes.len();
        let num = |s: &str| -> Result<Option<f64>, CliError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| CliError::Config(format!("bad number `{s}`")))
            }
        };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let point = (0..k)
                .map(|i| num(&rec[i]).map(|v| v.unwrap_or(f64::NAN)))
                .collect::<Result<_, _>>()?;
            rows.push(EvalRow {
                point,
                t: num(&rec[k])?.unwrap_or(f64::NAN),
                p_exact: num(&rec[k + 1])?,
                p_net: num(&rec[k + 2])?,
                p_ode: num(&rec[k + 3])?,
                status: rec[k + 8].to_string(),
            });
        }
        Ok(Self { axes, rows })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

/// Sidecar metadata: the full configuration echo plus content hashes of
/// every file written by the command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metadata {
    pub command: String,
    pub version: String,
    pub config: toml::Value,
    pub outputs: Vec<OutputFile>,
}

/// Collects output files of one command and writes the sidecar last.
pub struct OutputDir {
    dir: PathBuf,
    outputs: Vec<OutputFile>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| CliError::Io {
            path: path.clone(),
            source: e,
        })?;
        self.record(name, contents);
        Ok(path)
    }

    /// Registers a file written by someone else.
    pub fn record(&mut self, name: &str, contents: &[u8]) {
        self.outputs.push(OutputFile {
            file: name.to_string(),
            sha256: sha256_hex(contents),
        });
    }

    pub fn finish(mut self, command: &str, config: &crate::config::RunConfig) -> Result<PathBuf, CliError> {
        let meta = Metadata {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: toml::Value::try_from(config).map_err(|e| CliError::Config(e.to_string()))?,
            outputs: std::mem::take(&mut self.outputs),
        };
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        let path = self.path("meta.json");
        fs::write(&path, text).map_err(|e| CliError::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}
