use std::path::Path;

use fpflow::benchmarks::{euler_maruyama, histogram_density, AnalyticSolution, Benchmark, ParticleCloud};
use fpflow::fpcore::{predict_log_density, FpProblem};
use fpflow::networks::{self, AnyModel, Checkpoint, CouplingFlow, GaussianDensity, LogDensityModel, LogDensityTfp};
use fpflow::odesolve::SolverConfig;
use fpflow::training::{train_sfp, train_tfp, TrainTrace};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Grid, Mode, RunConfig};
use crate::report::{EvalReport, EvalRow, OutputDir, ReportSummary};
use crate::CliError;

fn setup(cfg: &RunConfig) -> Result<(Benchmark, Grid), CliError> {
    cfg.validate()?;
    let bench = cfg.problem.build()?;
    let grid = cfg
        .grid
        .resolve(cfg.problem.dim, bench.problem.horizon.unwrap_or(0.0))
        .map_err(|e| CliError::Config(e.join("; ")))?;
    Ok((bench, grid))
}

/// `log p` at the rows of `x` by backward characteristics. A failing batch
/// is retried point by point so that only the offending rows are flagged.
fn predict_rows(
    problem: &FpProblem,
    model: Option<&dyn LogDensityModel>,
    x: &Array2<f64>,
    t: f64,
    solver: &SolverConfig,
) -> Result<Vec<Result<f64, String>>, CliError> {
    match predict_log_density(problem, model, x, t, solver) {
        Ok(lp) => Ok(lp.iter().map(|&v| Ok(v)).collect()),
        Err(e) if is_numeric(&e) => x
            .outer_iter()
            .map(|row| {
                let one = row.to_owned().insert_axis(ndarray::Axis(0));
                match predict_log_density(problem, model, &one, t, solver) {
                    Ok(lp) => Ok(Ok(lp[0])),
                    Err(e) if is_numeric(&e) => Ok(Err(e.to_string())),
                    Err(e) => Err(e.into()),
                }
            })
            .collect(),
        Err(e) => Err(e.into()),
    }
}

fn is_numeric(e: &fpflow::Error) -> bool {
    matches!(e, fpflow::Error::NumericFailure { .. } | fpflow::Error::Divergence { .. })
}

/// Assembles rows from optional net and ODE predictions (log-densities).
fn build_report(
    grid: &Grid,
    x: &Array2<f64>,
    exact: Option<&AnalyticSolution>,
    net: Option<Array1<f64>>,
    ode: Option<Vec<Result<f64, String>>>,
) -> EvalReport {
    let exact_lp = exact.map(|s| s.log_density(x, grid.time));
    let rows = (0..x.nrows())
        .map(|i| {
            let (p_ode, status) = match ode.as_ref().map(|o| &o[i]) {
                Some(Ok(lp)) => (Some(lp.exp()), String::new()),
                Some(Err(msg)) => (None, msg.clone()),
                None => (None, String::new()),
            };
            EvalRow {
                point: grid.axes.iter().map(|&a| x[[i, a]]).collect(),
                t: grid.time,
                p_exact: exact_lp.as_ref().map(|l| l[i].exp()),
                p_net: net.as_ref().map(|l| l[i].exp()),
                p_ode,
                status,
            }
        })
        .collect();
    EvalReport {
        axes: grid.axes.clone(),
        rows,
    }
}

fn write_report(
    out: &mut OutputDir,
    report: &EvalReport,
    extra: impl Serialize,
) -> Result<ReportSummary, CliError> {
    let csv = report.to_csv()?;
    out.write("eval.csv", csv.as_bytes())?;
    let summary = report.summary();
    #[derive(Serialize)]
    struct Doc<'a, E: Serialize> {
        #[serde(flatten)]
        summary: &'a ReportSummary,
        #[serde(flatten)]
        extra: E,
    }
    let doc = serde_json::to_string_pretty(&Doc {
        summary: &summary,
        extra,
    })
    .expect("report serializes");
    out.write("report.json", doc.as_bytes())?;
    Ok(summary)
}

#[derive(Serialize)]
struct EvalInfo<'a> {
    problem: &'a str,
    dim: usize,
    time: f64,
}

/// Training-free solve of a zero-diffusion problem on the grid.
pub fn solve(cfg: &RunConfig) -> Result<(EvalReport, ReportSummary), CliError> {
    let (bench, grid) = setup(cfg)?;
    if !bench.problem.is_zero_diffusion() {
        return Err(CliError::Config(format!(
            "`solve` needs a zero-diffusion problem; `{}` has diffusion (use `train` then `eval`)",
            bench.problem.name
        )));
    }
    let x = grid.points();
    let ode = predict_rows(&bench.problem, None, &x, grid.time, &cfg.solver)?;
    let report = build_report(&grid, &x, Some(&bench.solution), None, Some(ode));
    let mut out = OutputDir::create(&cfg.output.dir)?;
    let info = EvalInfo {
        problem: &bench.problem.name,
        dim: bench.problem.dim,
        time: grid.time,
    };
    let summary = write_report(&mut out, &report, info)?;
    out.finish("solve", cfg)?;
    Ok((report, summary))
}

/// A freshly initialized model of the kind the problem calls for.
pub fn initial_model(cfg: &RunConfig, problem: &FpProblem) -> Result<AnyModel, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    Ok(match &problem.initial {
        Some(p0) => AnyModel::Potential(LogDensityTfp::new(p0.clone(), cfg.model.potential(), &mut rng)?),
        None => AnyModel::Coupling(CouplingFlow::new(problem.dim, cfg.model.flow(), &mut rng)?),
    })
}

#[derive(Serialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub skipped: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub seconds: f64,
}

/// Trains a model and writes `checkpoint.json`, `trace.csv` and `train.json`.
pub fn train(cfg: &RunConfig) -> Result<(AnyModel, TrainTrace), CliError> {
    let (bench, _) = setup(cfg)?;
    let mut model = initial_model(cfg, &bench.problem)?;
    let mut out = OutputDir::create(&cfg.output.dir)?;
    let mut tcfg = cfg.train.clone();
    if tcfg.checkpoint_path.is_none() {
        tcfg.checkpoint_path = Some(out.path("checkpoint.json"));
    }
    let trace = match &mut model {
        AnyModel::Potential(m) => train_tfp(&bench.problem, m, &tcfg, &cfg.solver)?,
        AnyModel::Coupling(f) => train_sfp(&bench.problem, f, &tcfg, &cfg.solver)?,
    };
    let ckpt_path = tcfg.checkpoint_path.clone().expect("set above");
    if let Ok(bytes) = std::fs::read(&ckpt_path) {
        let name = ckpt_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.record(&name, &bytes);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "loss", "seconds"])?;
    for (i, (l, s)) in trace.losses.iter().zip(&trace.seconds).enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string(), s.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    out.write("trace.csv", &bytes)?;
    let summary = TrainSummary {
        iterations: trace.losses.len(),
        skipped: trace.skipped.len(),
        initial_loss: trace.initial_loss(),
        final_loss: trace.final_loss(),
        seconds: trace.seconds.iter().sum(),
    };
    #[derive(Serialize)]
    struct Doc<'a> {
        #[serde(flatten)]
        summary: &'a TrainSummary,
        skipped_batches: &'a [fpflow::training::SkippedBatch],
    }
    let doc = serde_json::to_string_pretty(&Doc {
        summary: &summary,
        skipped_batches: &trace.skipped,
    })
    .expect("summary serializes");
    out.write("train.json", doc.as_bytes())?;
    out.finish("train", cfg)?;
    Ok((model, trace))
}

/// Evaluates a model on the grid in the configured modes.
pub fn evaluate(cfg: &RunConfig, model: &dyn LogDensityModel) -> Result<(EvalReport, ReportSummary), CliError> {
    let (bench, grid) = setup(cfg)?;
    if model.dim() != bench.problem.dim {
        return Err(CliError::Config(format!(
            "checkpoint has dimension {}, problem `{}` has {}",
            model.dim(),
            bench.problem.name,
            bench.problem.dim
        )));
    }
    let stationary = bench.problem.is_stationary();
    let mode = cfg.output.mode;
    if stationary && mode == Mode::Ode {
        return Err(CliError::Config(
            "stationary problems have no initial density; only `net` mode is available".into(),
        ));
    }
    let x = grid.points();
    let net = matches!(mode, Mode::Net | Mode::Both)
        .then(|| networks::log_density(model, &x, grid.time))
        .transpose()?;
    let ode = if !stationary && matches!(mode, Mode::Ode | Mode::Both) {
        Some(predict_rows(&bench.problem, Some(model), &x, grid.time, &cfg.solver)?)
    } else {
        None
    };
    let report = build_report(&grid, &x, Some(&bench.solution), net, ode);
    let mut out = OutputDir::create(&cfg.output.dir)?;
    let info = EvalInfo {
        problem: &bench.problem.name,
        dim: bench.problem.dim,
        time: grid.time,
    };
    let summary = write_report(&mut out, &report, info)?;
    out.finish("eval", cfg)?;
    Ok((report, summary))
}

pub fn load_checkpoint(path: &Path) -> Result<AnyModel, CliError> {
    Ok(Checkpoint::load(path)?.into_model()?)
}

#[derive(Clone, Debug, Serialize)]
pub struct McReport {
    pub problem: String,
    pub particles: usize,
    pub dt: f64,
    pub t1: f64,
    pub coords: Vec<usize>,
    /// Largest absolute deviation between histogram and exact bin averages.
    pub sup_error: f64,
    /// Sum of absolute deviations times the bin volume.
    pub l1_error: f64,
    /// Three standard deviations of the fullest bin.
    pub bound: f64,
    pub within_bound: bool,
    /// Same statistics for the model density at bin centres, if one was given.
    pub pinf_sup_error: Option<f64>,
    pub pinf_l1_error: Option<f64>,
}

/// Simulates the SDE, histograms the selected coordinates and compares with
/// the analytic marginal (and optionally a trained model).
pub fn mc_compare(cfg: &RunConfig, model: Option<&dyn LogDensityModel>) -> Result<McReport, CliError> {
    let (bench, _) = setup(cfg)?;
    let mc = &cfg.mc;
    let d = bench.problem.dim;
    let stationary = bench.problem.is_stationary();
    let t1 = mc.t1.or(bench.problem.horizon).unwrap_or(10.0);
    let t_exact = if stationary { 0.0 } else { t1 };
    let start = match &bench.problem.initial {
        Some(p0) => p0.clone(),
        None => GaussianDensity::new(vec![0.0; d], mc.start_var)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    let cloud = ParticleCloud::new(start.sample(mc.particles, &mut rng), 0.0, mc.seed)?;
    let out_cloud = euler_maruyama(&bench.problem, &cloud, mc.dt, t1)?;

    let (m, v) = bench.solution.mean_var(t_exact);
    let range = mc.range.map_or((m - 5.0 * v.sqrt(), m + 5.0 * v.sqrt()), |[lo, hi]| (lo, hi));
    let k = mc.coords.len();
    let hist = histogram_density(&out_cloud.positions, &mc.coords, &vec![mc.bins; k], &vec![range; k])?;
    let vol = hist.bin_volume();
    let exact: Vec<f64> = (0..hist.density.len())
        .map(|flat| {
            let idx = hist.index(flat);
            let e0 = hist.bin_edges(0, idx[0]);
            if k == 1 {
                bench.solution.marginal_bin_average(e0.0, e0.1, t_exact)
            } else {
                bench.solution.marginal_bin_average_2d(e0, hist.bin_edges(1, idx[1]), t_exact)
            }
        })
        .collect();
    let centers: Vec<Vec<f64>> = (0..k).map(|a| hist.centers(a)).collect();
    let pinf: Option<Vec<f64>> = match model {
        Some(m) if k == d => {
            let pts = Array2::from_shape_fn((hist.density.len(), d), |(flat, a)| centers[a][hist.index(flat)[a]]);
            Some(networks::log_density(m, &pts, t_exact)?.iter().map(|l| l.exp()).collect())
        }
        Some(_) => {
            return Err(CliError::Config(
                "model overlay needs every coordinate histogrammed (mc.coords must cover the dimension)".into(),
            ))
        }
        None => None,
    };

    let diffs = |pred: &[f64]| {
        let sup = pred.iter().zip(&exact).map(|(p, e)| (p - e).abs()).fold(0.0, f64::max);
        let l1 = pred.iter().zip(&exact).map(|(p, e)| (p - e).abs()).sum::<f64>() * vol;
        (sup, l1)
    };
    let (sup_error, l1_error) = diffs(&hist.density);
    let peak = exact.iter().copied().fold(0.0, f64::max);
    let bound = 3.0 * (peak / (mc.particles as f64 * vol)).sqrt();
    let pinf_stats = pinf.as_deref().map(diffs);

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = mc.coords.iter().map(|c| format!("bin_center_x{c}")).collect();
    header.extend(["density", "exact"].map(String::from));
    if pinf.is_some() {
        header.push("pinf".into());
    }
    w.write_record(&header)?;
    for flat in 0..hist.density.len() {
        let idx = hist.index(flat);
        let mut rec: Vec<String> = (0..k).map(|a| centers[a][idx[a]].to_string()).collect();
        rec.push(hist.density[flat].to_string());
        rec.push(exact[flat].to_string());
        if let Some(p) = &pinf {
            rec.push(p[flat].to_string());
        }
        w.write_record(rec)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    let report = McReport {
        problem: bench.problem.name.clone(),
        particles: mc.particles,
        dt: mc.dt,
        t1,
        coords: mc.coords.clone(),
        sup_error,
        l1_error,
        bound,
        within_bound: sup_error <= bound,
        pinf_sup_error: pinf_stats.map(|s| s.0),
        pinf_l1_error: pinf_stats.map(|s| s.1),
    };
    let mut out = OutputDir::create(&cfg.output.dir)?;
    out.write("mc.csv", &bytes)?;
    out.write(
        "mc.json",
        serde_json::to_string_pretty(&report).expect("report serializes").as_bytes(),
    )?;
    out.finish("mc-compare", cfg)?;
    Ok(report)
}
