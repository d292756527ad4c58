//! Layered run configuration: built-in defaults, then a TOML file, then
//! `--set key=value` overrides and dedicated flags.

use std::path::{Path, PathBuf};

use fpflow::benchmarks::{build_problem, Benchmark, ProblemParams};
use fpflow::networks::{FlowConfig, PotentialConfig};
use fpflow::odesolve::SolverConfig;
use fpflow::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ProblemSection {
    pub name: String,
    pub dim: usize,
    pub a: f64,
    pub sigma: f64,
    pub horizon: Option<f64>,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            name: "tfp-gauss".into(),
            dim: 2,
            a: 1.0,
            sigma: 1.0,
            horizon: None,
        }
    }
}

impl ProblemSection {
    pub fn params(&self) -> ProblemParams {
        ProblemParams {
            dim: self.dim,
            a: self.a,
            sigma: self.sigma,
            horizon: self.horizon,
        }
    }

    pub fn build(&self) -> fpflow::Result<Benchmark> {
        build_problem(&self.name, &self.params())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ModelSection {
    /// Residual layers of the potential network.
    pub layers: usize,
    /// Hidden width of the potential network.
    pub width: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub s_max: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = PotentialConfig::default();
        let f = FlowConfig::default();
        Self {
            layers: p.layers,
            width: p.width,
            flow_layers: f.layers,
            flow_hidden: f.hidden,
            s_max: f.s_max,
        }
    }
}

impl ModelSection {
    pub fn potential(&self) -> PotentialConfig {
        PotentialConfig {
            layers: self.layers,
            width: self.width,
        }
    }

    pub fn flow(&self) -> FlowConfig {
        FlowConfig {
            layers: self.flow_layers,
            hidden: self.flow_hidden,
            s_max: self.s_max,
        }
    }
}

/// Evaluation grid: a tensor grid over the swept axes, every other
/// coordinate held at `fixed` (or `fill`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct GridSpec {
    /// Swept coordinates; defaults to the first one or two.
    pub axes: Option<Vec<usize>>,
    /// One `[lo, hi]` per swept axis; defaults to `[-5, 5]`.
    pub ranges: Option<Vec<[f64; 2]>>,
    /// Points per swept axis; defaults to 50.
    pub counts: Option<Vec<usize>>,
    /// Values of the remaining coordinates, in increasing axis order.
    pub fixed: Option<Vec<f64>>,
    /// Value of the remaining coordinates when `fixed` is absent.
    pub fill: Option<f64>,
    /// Evaluation time; defaults to the problem horizon.
    pub time: Option<f64>,
}

/// A validated grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub axes: Vec<usize>,
    pub ranges: Vec<[f64; 2]>,
    pub counts: Vec<usize>,
    /// Full template point; swept entries are overwritten.
    pub base: Vec<f64>,
    pub time: f64,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major over the swept axes; the last axis varies fastest.
    pub fn points(&self) -> ndarray::Array2<f64> {
        let d = self.base.len();
        let mut out = ndarray::Array2::zeros((self.len(), d));
        for (r, mut row) in out.outer_iter_mut().enumerate() {
            row.assign(&ndarray::ArrayView1::from(&self.base));
            let mut rest = r;
            for a in (0..self.axes.len()).rev() {
                let n = self.counts[a];
                let i = rest % n;
                rest /= n;
                let [lo, hi] = self.ranges[a];
                row[self.axes[a]] = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            }
        }
        out
    }
}

impl GridSpec {
    pub fn resolve(&self, dim: usize, default_time: f64) -> Result<Grid, Vec<String>> {
        let mut errs = Vec::new();
        let axes = self.axes.clone().unwrap_or_else(|| (0..dim.min(2)).collect());
        if axes.is_empty() {
            errs.push("grid.axes must name at least one coordinate".to_string());
        }
        if let Some(&a) = axes.iter().find(|&&a| a >= dim) {
            errs.push(format!("grid.axes entry {a} is out of range for dimension {dim}"));
        }
        let mut sorted = axes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() {
            errs.push("grid.axes must not repeat a coordinate".to_string());
        }
        let ranges = self.ranges.clone().unwrap_or_else(|| vec![[-5.0, 5.0]; axes.len()]);
        let counts = self.counts.clone().unwrap_or_else(|| vec![50; axes.len()]);
        if ranges.len() != axes.len() {
            errs.push(format!("grid.ranges has {} entries for {} axes", ranges.len(), axes.len()));
        }
        if counts.len() != axes.len() {
            errs.push(format!("grid.counts has {} entries for {} axes", counts.len(), axes.len()));
        }
        if counts.iter().any(|&c| c < 2) {
            errs.push("grid.counts must be at least 2 per swept axis".to_string());
        }
        if ranges.iter().any(|[lo, hi]| !(lo < hi && lo.is_finite() && hi.is_finite())) {
            errs.push("grid.ranges must be finite with lo < hi".to_string());
        }
        let free = dim.saturating_sub(axes.len());
        let fixed = match &self.fixed {
            Some(f) => {
                if f.len() != free {
                    errs.push(format!(
                        "grid.fixed has {} values; dimension {dim} with {} swept axes needs {free}",
                        f.len(),
                        axes.len()
                    ));
                }
                f.clone()
            }
            None => vec![self.fill.unwrap_or(0.0); free],
        };
        let time = self.time.unwrap_or(default_time);
        if !(time >= 0.0 && time.is_finite()) {
            errs.push(format!("grid.time must be non-negative, got {time}"));
        }
        if !errs.is_empty() {
            return Err(errs);
        }
        let mut base = vec![0.0; dim];
        let mut it = fixed.into_iter();
        for (j, b) in base.iter_mut().enumerate() {
            if !axes.contains(&j) {
                *b = it.next().unwrap_or(0.0);
            }
        }
        Ok(Grid {
            axes,
            ranges,
            counts,
            base,
            time,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct McSection {
    pub particles: usize,
    pub dt: f64,
    pub bins: usize,
    pub seed: u64,
    /// Final time; defaults to the problem horizon, or 10 for stationary problems.
    pub t1: Option<f64>,
    /// Variance of the isotropic starting cloud for stationary problems.
    pub start_var: f64,
    /// Histogrammed coordinates (one or two).
    pub coords: Vec<usize>,
    /// Histogram range per coordinate; defaults to mean ± 5 standard deviations.
    pub range: Option<[f64; 2]>,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            particles: 100_000,
            dt: 1e-3,
            bins: 100,
            seed: 0,
            t1: None,
            start_var: 1.0,
            coords: vec![0],
            range: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Net,
    Ode,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct OutputSection {
    pub dir: PathBuf,
    pub mode: Mode,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            mode: Mode::Both,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub grid: GridSpec,
    pub mc: McSection,
    pub output: OutputSection,
}

/// Flag-level overrides applied after the file and `--set` pairs.
#[derive(Clone, Debug, Default)]
pub struct FlagOverrides {
    pub problem: Option<String>,
    pub dim: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<Mode>,
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed key `{key}`"));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry((*p).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| format!("`{key}`: `{p}` is not a section"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `sets` (`key=value`, value in TOML syntax), then `flags`.
    pub fn load(file: Option<&Path>, sets: &[String], flags: &FlagOverrides) -> Result<Self, CliError> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let user: toml::Table = text
                .parse()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, user);
        }
        let mut errs = Vec::new();
        for s in sets {
            match s.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = set_path(&mut table, k.trim(), parse_value(v.trim())) {
                        errs.push(e);
                    }
                }
                None => errs.push(format!("override `{s}` is not of the form key=value")),
            }
        }
        let mut pairs: Vec<(&str, toml::Value)> = Vec::new();
        if let Some(p) = &flags.problem {
            pairs.push(("problem.name", toml::Value::String(p.clone())));
        }
        if let Some(d) = flags.dim {
            pairs.push(("problem.dim", toml::Value::Integer(d as i64)));
        }
        if let Some(s) = flags.seed {
            pairs.push(("train.seed", toml::Value::Integer(s as i64)));
            pairs.push(("mc.seed", toml::Value::Integer(s as i64)));
        }
        if let Some(o) = &flags.out {
            pairs.push(("output.dir", toml::Value::String(o.display().to_string())));
        }
        if let Some(m) = flags.mode {
            let name = match m {
                Mode::Net => "net",
                Mode::Ode => "ode",
                Mode::Both => "both",
            };
            pairs.push(("output.mode", toml::Value::String(name.into())));
        }
        for (k, v) in pairs {
            set_path(&mut table, k, v).map_err(CliError::Config)?;
        }
        if !errs.is_empty() {
            return Err(CliError::Config(errs.join("; ")));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Every problem in the configuration, reported together.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut errs = Vec::new();
        let bench = self.problem.build();
        if let Err(e) = &bench {
            errs.push(e.to_string());
        }
        if let Err(fpflow::Error::Config(m)) = self.train.validate() {
            errs.push(m);
        }
        if let Err(fpflow::Error::Config(m)) = self.solver.validate() {
            errs.push(m);
        }
        if self.model.layers == 0 || self.model.width == 0 || self.model.flow_layers == 0 || self.model.flow_hidden == 0 {
            errs.push("model layer counts and widths must be positive".to_string());
        }
        if let Ok(b) = &bench {
            if let Err(g) = self.grid.resolve(self.problem.dim, b.problem.horizon.unwrap_or(0.0)) {
                errs.extend(g);
            }
        }
        let mc = &self.mc;
        if mc.particles == 0 {
            errs.push("mc.particles must be at least 1".to_string());
        }
        if !(mc.dt > 0.0 && mc.dt.is_finite()) {
            errs.push(format!("mc.dt must be positive, got {}", mc.dt));
        }
        if mc.bins == 0 {
            errs.push("mc.bins must be at least 1".to_string());
        }
        if mc.coords.is_empty() || mc.coords.len() > 2 || mc.coords.iter().any(|&c| c >= self.problem.dim) {
            errs.push(format!(
                "mc.coords must name one or two coordinates below {}",
                self.problem.dim
            ));
        }
        if !(mc.start_var > 0.0 && mc.start_var.is_finite()) {
            errs.push(format!("mc.start-var must be positive, got {}", mc.start_var));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs.join("; ")))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
