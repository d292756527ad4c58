use std::path::Path;
use std::process::Command;

use fpflow::benchmarks::{tfp_gauss_problem, AnalyticModel};
use fpflow::networks::{Checkpoint, GaussianDensity, LogDensityTfp, PotentialConfig};
use fpflow_cli::commands;
use fpflow_cli::config::{FlagOverrides, Mode, RunConfig};
use fpflow_cli::report::{sha256_hex, EvalReport, Metadata};
use fpflow_cli::CliError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(out: &Path, sets: &[&str]) -> RunConfig {
    let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    let flags = FlagOverrides {
        out: Some(out.to_path_buf()),
        ..FlagOverrides::default()
    };
    RunConfig::load(None, &sets, &flags).unwrap()
}

#[test]
fn layers_apply_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "[problem]\nname = \"toy\"\ndim = 3\n[train]\nlr = 0.05\nbatch = 64\n").unwrap();
    let sets = vec!["train.lr=0.002".to_string(), "grid.counts=[4, 5]".to_string()];
    let flags = FlagOverrides {
        dim: Some(4),
        seed: Some(9),
        mode: Some(Mode::Ode),
        ..FlagOverrides::default()
    };
    let cfg = RunConfig::load(Some(&file), &sets, &flags).unwrap();
    assert_eq!(cfg.problem.name, "toy");
    assert_eq!(cfg.problem.dim, 4);
    assert_eq!(cfg.train.lr, 0.002);
    assert_eq!(cfg.train.batch, 64);
    assert_eq!(cfg.train.seed, 9);
    assert_eq!(cfg.mc.seed, 9);
    assert_eq!(cfg.output.mode, Mode::Ode);
    assert_eq!(cfg.grid.counts, Some(vec![4, 5]));
    assert_eq!(cfg.train.iterations, RunConfig::default().train.iterations);

    let echoed = RunConfig::load(None, &[], &FlagOverrides::default()).unwrap();
    assert_eq!(echoed, RunConfig::default());
    let text = cfg.to_toml();
    std::fs::write(&file, text).unwrap();
    assert_eq!(RunConfig::load(Some(&file), &[], &FlagOverrides::default()).unwrap(), cfg);
}

#[test]
fn bad_configuration_is_reported_in_full() {
    let unknown = RunConfig::load(None, &["train.speed=3".into()], &FlagOverrides::default());
    assert!(matches!(unknown, Err(CliError::Config(m)) if m.contains("speed")));

    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &["train.lr=-1", "mc.particles=0", "grid.axes=[7]"]);
    match cfg.validate() {
        Err(e @ CliError::Config(_)) => {
            let m = e.to_string();
            assert!(m.contains("lr") && m.contains("mc.particles") && m.contains("grid.axes"), "{m}");
            assert_eq!(e.exit_code(), 2);
        }
        other => panic!("{other:?}"),
    }
    let cfg = config(dir.path(), &["problem.name=\"nope\""]);
    assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
}

#[test]
fn grid_is_row_major_with_fixed_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        &["problem.dim=4", "grid.axes=[1, 3]", "grid.counts=[2, 3]", "grid.ranges=[[0, 1], [-1, 1]]", "grid.fixed=[7, 8]"],
    );
    let grid = cfg.grid.resolve(4, 1.0).unwrap();
    let x = grid.points();
    assert_eq!(x.nrows(), 6);
    assert_eq!(x.row(0).to_vec(), vec![7.0, 0.0, 8.0, -1.0]);
    assert_eq!(x.row(1).to_vec(), vec![7.0, 0.0, 8.0, 0.0]);
    assert_eq!(x.row(5).to_vec(), vec![7.0, 1.0, 8.0, 1.0]);
    assert_eq!(grid.time, 1.0);
}

#[test]
fn exact_model_gives_zero_error_and_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &["grid.counts=[9, 9]", "output.mode=\"net\""]);
    let bench = tfp_gauss_problem(2).unwrap();
    let exact = AnalyticModel::new(bench.solution.clone());
    let (report, summary) = commands::evaluate(&cfg, &exact).unwrap();
    let net = summary.net.unwrap();
    assert_eq!(net.count, 81);
    assert!(net.mape < 1e-10 && net.max_rel < 1e-12, "{net:?}");
    assert!(summary.ode.is_none());

    let text = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let back = EvalReport::from_csv(&text).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.summary(), summary);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["points"], 81);
}

#[test]
fn zero_diffusion_modes_agree_for_any_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &["problem.name=\"toy\"", "problem.dim=3", "grid.counts=[6, 6]", "output.mode=\"ode\""]);
    let (solved, _) = commands::solve(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p0 = cfg.problem.build().unwrap().problem.initial.unwrap();
    let model = LogDensityTfp::new(p0, PotentialConfig { layers: 2, width: 8 }, &mut rng).unwrap();
    let (evaluated, summary) = commands::evaluate(&cfg, &model).unwrap();
    for (a, b) in solved.rows.iter().zip(&evaluated.rows) {
        let (pa, pb) = (a.p_ode.unwrap(), b.p_ode.unwrap());
        assert!((pa - pb).abs() <= 1e-12 * pa.max(1e-300), "{pa} vs {pb}");
    }
    assert!(summary.ode.unwrap().max_rel < 1e-6);
}

#[test]
fn solve_rejects_diffusive_problems() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[]);
    let err = commands::solve(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn smoke_training_writes_checkpoint_trace_and_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &["train.iterations=1", "train.batch=8", "model.layers=1", "model.width=4", "solver.steps=2"]);
    let (model, trace) = commands::train(&cfg).unwrap();
    assert_eq!(trace.losses.len(), 1);
    let trace_csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace_csv.lines().count(), 2);

    let ckpt = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    let loaded = ckpt.into_model().unwrap();
    assert_eq!(loaded.as_model().params(), model.as_model().params());

    let meta: Metadata = serde_json::from_str(&std::fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta.command, "train");
    let names: Vec<&str> = meta.outputs.iter().map(|o| o.file.as_str()).collect();
    for f in ["checkpoint.json", "trace.csv", "train.json"] {
        assert!(names.contains(&f), "{names:?}");
    }
    for o in &meta.outputs {
        let bytes = std::fs::read(dir.path().join(&o.file)).unwrap();
        assert_eq!(sha256_hex(&bytes), o.sha256, "{}", o.file);
    }
    let echoed: RunConfig = meta.config.try_into().unwrap();
    assert_eq!(echoed, cfg);

    let eval_dir = dir.path().join("eval");
    let eval_cfg = config(&eval_dir, &["grid.counts=[3, 3]", "solver.method=\"rk4-fixed\"", "solver.steps=2"]);
    let (_, summary) = commands::evaluate(&eval_cfg, loaded.as_model()).unwrap();
    assert_eq!(summary.points, 9);
    assert!(summary.net.is_some() && summary.ode.is_some());
}

#[test]
fn checkpoint_dimension_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &["problem.dim=3"]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = LogDensityTfp::new(GaussianDensity::standard(2), PotentialConfig { layers: 1, width: 4 }, &mut rng).unwrap();
    assert!(matches!(commands::evaluate(&cfg, &model), Err(CliError::Config(_))));
}

#[test]
fn mc_compare_validates_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &["mc.particles=0"]);
    assert!(matches!(commands::mc_compare(&cfg, None), Err(CliError::Config(_))));

    let cfg = config(dir.path(), &["problem.name=\"toy\"", "problem.dim=1", "mc.particles=20000", "mc.dt=0.01", "mc.bins=40"]);
    let r = commands::mc_compare(&cfg, None).unwrap();
    assert!(r.within_bound, "{r:?}");
    let csv = std::fs::read_to_string(dir.path().join("mc.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41);
}

fn fpflow(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fpflow")).args(args).output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad = fpflow(&["solve", "--out", out, "--set", "train.lr=-1"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("lr"));

    let ok = fpflow(&["solve", "--problem", "toy", "--dim", "1", "--out", out, "--set", "grid.counts=[20]"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("MAPE"));
    assert!(dir.path().join("meta.json").exists());

    let missing = fpflow(&["eval", "--out", out, "--checkpoint", "/nonexistent/ckpt.json"]);
    assert_ne!(missing.status.code(), Some(0));

    let shown = fpflow(&["config", "--dim", "5"]);
    assert!(String::from_utf8_lossy(&shown.stdout).contains("dim = 5"));
}
