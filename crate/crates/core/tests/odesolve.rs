use fpflow::benchmarks::{tfp_gauss_problem, toy_problem};
use fpflow::fpcore::{augmented_dynamics_tape, AugmentedState, ModelRef};
use fpflow::networks::{GaussianDensity, LogDensityModel, LogDensityTfp, PotentialConfig};
use fpflow::odesolve::{ode_solve, ode_solve_with_grad, Method, SolverConfig};
use fpflow::{Error, Graph, Result, Tensor, VariableSet};
use ndarray::{array, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn quadratic(g: &mut Graph, t: f64, x: Tensor, l: Tensor) -> Result<(Tensor, Tensor)> {
    let (b, d) = g.shape(x);
    Ok((g.filled(b, d, 2.0 * t), g.filled(g.shape(l).0, 1, 0.0)))
}

fn exponential(g: &mut Graph, _t: f64, x: Tensor, l: Tensor) -> Result<(Tensor, Tensor)> {
    Ok((x, g.scale(l, 0.0)))
}

fn state(x: Array2<f64>, l: Vec<f64>) -> AugmentedState {
    AugmentedState::new(x, Array1::from_vec(l)).unwrap()
}

#[test]
fn quadratic_path_forward_and_back() {
    let s0 = state(Array2::zeros((3, 2)), vec![0.1, -2.0, 7.0]);
    for cfg in [SolverConfig::rk4(1), SolverConfig::rk4(7), SolverConfig::default()] {
        let s1 = ode_solve(quadratic, &s0, 0.0, 1.0, &cfg).unwrap();
        assert!(s1.x.iter().all(|&v| (v - 1.0).abs() < 1e-12), "{cfg:?}");
        assert_eq!(s1.logp, s0.logp);
        let back = ode_solve(quadratic, &s1, 1.0, 0.0, &cfg).unwrap();
        assert!(back.x.iter().all(|&v| v.abs() < 1e-12));
    }
}

#[test]
fn zero_dynamics_leave_the_state() {
    let zero = |g: &mut Graph, _t: f64, x: Tensor, l: Tensor| -> Result<(Tensor, Tensor)> {
        Ok((g.scale(x, 0.0), g.scale(l, 0.0)))
    };
    let s0 = state(array![[1.5, -0.25]], vec![3.0]);
    for cfg in [SolverConfig::rk4(4), SolverConfig::default()] {
        assert_eq!(ode_solve(zero, &s0, 0.0, 2.0, &cfg).unwrap(), s0);
    }
}

#[test]
fn rk4_observed_order() {
    let s0 = state(array![[1.0]], vec![0.0]);
    let err = |n| (ode_solve(exponential, &s0, 0.0, 1.0, &SolverConfig::rk4(n)).unwrap().x[[0, 0]] - 1f64.exp()).abs();
    let (e1, e2, e3) = (err(8), err(16), err(32));
    assert!((e1 / e2).log2() >= 3.9 && (e2 / e3).log2() >= 3.9, "{e1} {e2} {e3}");
}

#[test]
fn adaptive_meets_tolerance_and_reverses() {
    let cfg = SolverConfig::default();
    let s0 = state(array![[1.0, -0.5]], vec![0.0]);
    let s1 = ode_solve(exponential, &s0, 0.0, 2.0, &cfg).unwrap();
    let e2 = 2f64.exp();
    assert!((s1.x[[0, 0]] - e2).abs() < 1e-5 * e2);
    let back = ode_solve(exponential, &s1, 2.0, 0.0, &cfg).unwrap();
    for (a, b) in back.x.iter().zip(s0.x.iter()) {
        assert!((a - b).abs() <= 10.0 * (cfg.atol + cfg.rtol * b.abs()), "{a} vs {b}");
    }
}

#[test]
fn fixed_mode_is_bit_deterministic() {
    let bench = tfp_gauss_problem(2).unwrap();
    let model = tiny_model(2, 3);
    let x = points(16, 2, 4);
    let s0 = state(x, vec![0.0; 16]);
    let run = || {
        ode_solve(dynamics(&bench.problem, &model), &s0, 0.0, 0.8, &SolverConfig::rk4(6)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn adaptive_and_fixed_agree_on_the_toy_problem() {
    let bench = toy_problem(3).unwrap();
    let s0 = state(points(10, 3, 1), vec![0.0; 10]);
    let f = |g: &mut Graph, t: f64, x: Tensor, _l: Tensor| {
        let tt = g.filled(g.shape(x).0, 1, t);
        augmented_dynamics_tape(g, &bench.problem, None, x, tt)
    };
    let a = ode_solve(f, &s0, 0.0, 1.0, &SolverConfig::rk4(20)).unwrap();
    let b = ode_solve(f, &s0, 0.0, 1.0, &SolverConfig::default()).unwrap();
    let diff = (&a.x - &b.x).iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(diff < 1e-9, "{diff}");
    assert_eq!(a.logp, s0.logp);
}

#[test]
fn step_budget_reports_divergence() {
    let cfg = SolverConfig {
        max_steps: 3,
        ..SolverConfig::default()
    };
    let s0 = state(array![[1.0]], vec![0.0]);
    match ode_solve(exponential, &s0, 0.0, 10.0, &cfg) {
        Err(Error::Divergence { max_steps, last_time }) => {
            assert_eq!(max_steps, 3);
            assert!((0.0..10.0).contains(&last_time));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn nan_dynamics_report_the_time() {
    let blowup = |g: &mut Graph, t: f64, x: Tensor, l: Tensor| -> Result<(Tensor, Tensor)> {
        let (b, d) = g.shape(x);
        let c = g.filled(b, d, if t > 0.5 { -1.0 } else { 1.0 });
        Ok((g.ln(c), g.scale(l, 0.0)))
    };
    let s0 = state(array![[0.0]], vec![0.0]);
    for cfg in [SolverConfig::rk4(10), SolverConfig::default()] {
        match ode_solve(blowup, &s0, 0.0, 1.0, &cfg) {
            Err(Error::NumericFailure { primitive, time }) => {
                assert_eq!(primitive, "ln");
                assert!(time.unwrap() > 0.5);
            }
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let s0 = state(array![[0.0]], vec![0.0]);
    let cfg = SolverConfig { atol: 0.0, ..SolverConfig::default() };
    assert!(matches!(ode_solve(quadratic, &s0, 0.0, 1.0, &cfg), Err(Error::Config(_))));
    assert!(matches!(
        ode_solve(quadratic, &s0, 0.0, f64::INFINITY, &SolverConfig::rk4(2)),
        Err(Error::Config(_))
    ));
    let vars = VariableSet::new();
    let adaptive = SolverConfig {
        method: Method::Dopri5Adaptive,
        ..SolverConfig::default()
    };
    let r = ode_solve_with_grad(|g, _p, t, x, l| quadratic(g, t, x, l), &s0, 0.0, 1.0, &adaptive, &vars);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn parameter_free_dynamics_have_zero_gradient() {
    let mut vars = VariableSet::new();
    vars.insert("theta", array![[0.7]]).unwrap();
    let s0 = state(array![[0.3]], vec![0.0]);
    let mut solve =
        ode_solve_with_grad(|g, _p, t, x, l| quadratic(g, t, x, l), &s0, 0.0, 1.0, &SolverConfig::rk4(5), &vars).unwrap();
    let grads = solve.gradient(|g, _x, l| Ok(g.sum_all(l))).unwrap();
    assert_eq!(grads.get("theta").unwrap()[[0, 0]], 0.0);
}

#[test]
fn linear_log_density_rate_has_unit_gradient() {
    let mut vars = VariableSet::new();
    vars.insert("theta", array![[0.7]]).unwrap();
    let s0 = state(array![[0.3]], vec![0.0]);
    let f = |g: &mut Graph, p: &fpflow::Bindings, _t: f64, x: Tensor, _l: Tensor| {
        let zero = g.scale(x, 0.0);
        Ok((zero, p.get(0)))
    };
    let mut solve = ode_solve_with_grad(f, &s0, 0.0, 1.0, &SolverConfig::rk4(1), &vars).unwrap();
    assert!((solve.state().logp[0] - 0.7).abs() < 1e-15);
    let grads = solve.gradient(|g, _x, l| Ok(g.sum_all(l))).unwrap();
    assert!((grads.get("theta").unwrap()[[0, 0]] - 1.0).abs() < 1e-14);
}

fn tiny_model(d: usize, seed: u64) -> LogDensityTfp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = LogDensityTfp::new(GaussianDensity::standard(d), PotentialConfig { layers: 2, width: 5 }, &mut rng).unwrap();
    let n = Normal::new(0.0, 0.3).unwrap();
    for v in m.params_mut().iter_mut() {
        v.value.mapv_inplace(|_| n.sample(&mut rng));
    }
    m
}

fn points(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((n, d), |_| nd.sample(&mut rng))
}

fn dynamics<'a>(
    problem: &'a fpflow::fpcore::FpProblem,
    model: &'a LogDensityTfp,
) -> impl FnMut(&mut Graph, f64, Tensor, Tensor) -> Result<(Tensor, Tensor)> + 'a {
    move |g, t, x, _l| {
        let params = model.params().bind(g, false);
        let tt = g.filled(g.shape(x).0, 1, t);
        augmented_dynamics_tape(g, problem, Some(ModelRef { model, params: &params }), x, tt)
    }
}

#[test]
fn gradient_through_the_solve_matches_finite_differences() {
    let d = 2;
    let bench = tfp_gauss_problem(d).unwrap();
    let model = tiny_model(d, 7);
    let s0 = state(points(4, d, 8), vec![0.2, -0.1, 0.0, 0.4]);
    let cfg = SolverConfig::rk4(5);
    let loss_of = |m: &LogDensityTfp| {
        let s = ode_solve(dynamics(&bench.problem, m), &s0, 0.0, 0.9, &cfg).unwrap();
        s.logp.iter().map(|v| v * v).sum::<f64>() + s.x.sum()
    };
    let mut solve = ode_solve_with_grad(
        |g, p, t, x, _l| {
            let tt = g.filled(g.shape(x).0, 1, t);
            augmented_dynamics_tape(g, &bench.problem, Some(ModelRef { model: &model, params: p }), x, tt)
        },
        &s0,
        0.0,
        0.9,
        &cfg,
        model.params(),
    )
    .unwrap();
    assert_eq!(solve.state(), ode_solve(dynamics(&bench.problem, &model), &s0, 0.0, 0.9, &cfg).unwrap());
    let grads = solve
        .gradient(|g, x, l| {
            let l2 = g.square(l);
            let a = g.sum_all(l2);
            let b = g.sum_all(x);
            Ok(g.add(a, b))
        })
        .unwrap();
    assert!((grads.value - loss_of(&model)).abs() < 1e-12);

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, var) in model.params().iter().enumerate() {
        let (r, c) = var.value.dim();
        for k in 0..r * c {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.params_mut().value_mut(i).as_slice_mut().unwrap()[k] += h;
            minus.params_mut().value_mut(i).as_slice_mut().unwrap()[k] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let ad = grads.all()[i][[k / c, k % c]];
            worst = worst.max((ad - fd).abs() / (1e-6 + fd.abs().max(ad.abs())));
        }
    }
    assert!(worst < 1e-4, "relative gradient error {worst}");
}
