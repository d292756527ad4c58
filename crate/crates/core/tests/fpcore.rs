use std::sync::Arc;

use fpflow::benchmarks::{sfp_ou_problem, tfp_gauss_problem, toy_problem, AnalyticModel};
use fpflow::diffengine::fd;
use fpflow::fpcore::{
    augmented_dynamics, effective_drift, scale_invariance_check, AugmentedState, Diffusion, DiffusionField, FpProblem,
    LinearRestoringDrift, UniformDrift,
};
use fpflow::networks::{CouplingFlow, FlowConfig, GaussianDensity, LogDensityModel, LogDensityTfp, PotentialConfig};
use fpflow::{Error, Graph, Tensor};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_points(n: usize, d: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, scale).unwrap();
    Array2::from_shape_fn((n, d), |_| dist.sample(&mut rng))
}

fn randomize(model: &mut dyn LogDensityModel, sd: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sd).unwrap();
    for v in model.params_mut().iter_mut() {
        v.value.mapv_inplace(|_| n.sample(&mut rng));
    }
}

fn random_tfp(d: usize, seed: u64) -> LogDensityTfp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = LogDensityTfp::new(
        GaussianDensity::standard(d),
        PotentialConfig { layers: 2, width: 8 },
        &mut rng,
    )
    .unwrap();
    randomize(&mut m, 0.3, seed + 1);
    m
}

fn max_abs(a: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().map(f64::abs).fold(0.0, f64::max)
}

/// `D(x) = ½ diag(1 + xᵢ²) + a aᵀ` with `a = ½(x₁, x₀, 0, …)`.
struct SkewField {
    dim: usize,
}

impl DiffusionField for SkewField {
    fn rank(&self) -> usize {
        self.dim + 1
    }

    fn factor(&self, g: &mut Graph, x: Tensor, _t: Tensor) -> Tensor {
        let (b, d) = g.shape(x);
        let k = d + 1;
        let sq = g.square(x);
        let half = g.scale(sq, 0.5);
        let half = g.offset(half, 0.5);
        let ln = g.ln(half);
        let ln = g.scale(ln, 0.5);
        let diag = g.exp(ln);
        let diag = g.repeat_rows(diag, k);
        let eye = g.constant(Array2::from_shape_fn((b * k, d), |(r, c)| f64::from(r % k == c)));
        let diag = g.mul(diag, eye);
        let x1 = g.columns(x, 1, 1);
        let x0 = g.columns(x, 0, 1);
        let mut parts = vec![x1, x0];
        if d > 2 {
            parts.push(g.filled(b, d - 2, 0.0));
        }
        let a = g.concat(&parts);
        let a = g.scale(a, 0.5);
        let a = g.repeat_rows(a, k);
        let last = g.constant(Array2::from_shape_fn((b * k, d), |(r, _)| f64::from(r % k == d)));
        let a = g.mul(a, last);
        g.add(diag, a)
    }

    fn row_divergence(&self, g: &mut Graph, x: Tensor, _t: Tensor) -> Tensor {
        let (b, d) = g.shape(x);
        let w = g.constant(Array2::from_shape_fn((b, d), |(_, c)| if c < 2 { 1.25 } else { 1.0 }));
        g.mul(x, w)
    }

    fn row_divergence_divergence(&self, g: &mut Graph, x: Tensor, _t: Tensor) -> Tensor {
        let b = g.shape(x).0;
        g.filled(b, 1, self.dim as f64 + 0.5)
    }
}

fn skew_problem(d: usize) -> FpProblem {
    FpProblem {
        name: "skew".into(),
        dim: d,
        drift: Arc::new(LinearRestoringDrift { a: 0.7 }),
        diffusion: Diffusion::Field(Arc::new(SkewField { dim: d })),
        initial: Some(GaussianDensity::standard(d)),
        horizon: Some(1.0),
    }
}

#[test]
fn skew_field_row_divergence_matches_finite_differences() {
    let d = 3;
    let p = skew_problem(d);
    let x = random_points(5, d, 1.0, 3);
    let Diffusion::Field(field) = &p.diffusion else { unreachable!() };
    let mut g = Graph::new();
    let xt = g.constant(x.clone());
    let tt = g.filled(5, 1, 0.0);
    let rd = field.row_divergence(&mut g, xt, tt);
    let rd = g.value(rd).clone();
    for b in 0..5 {
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..d {
                let h = 1e-5;
                let mut xp = x.row(b).to_vec();
                let mut xm = xp.clone();
                xp[i] += h;
                xm[i] -= h;
                let dij = |v: &[f64]| p.diffusion_matrix(v, 0.0).unwrap()[[i, j]];
                s += (dij(&xp) - dij(&xm)) / (2.0 * h);
            }
            assert!((s - rd[[b, j]]).abs() < 1e-8, "b={b} j={j}: {s} vs {}", rd[[b, j]]);
        }
    }
}

#[test]
fn zero_diffusion_keeps_the_drift() {
    let bench = toy_problem(4).unwrap();
    let x = random_points(6, 4, 1.0, 1);
    let t = 0.35;
    let mu = effective_drift(&bench.problem, None, &x, t).unwrap();
    assert!(mu.iter().all(|&v| v == 2.0 * t));
    let state = AugmentedState::new(x, Array1::zeros(6)).unwrap();
    let (_, dl) = augmented_dynamics(&bench.problem, None, &state, t).unwrap();
    assert!(dl.iter().all(|&v| v == 0.0));
}

#[test]
fn exact_gaussian_solution_gives_closed_form_drift() {
    let d = 10;
    let bench = tfp_gauss_problem(d).unwrap();
    let model = AnalyticModel::new(bench.solution);
    for t in [0.0, 0.4, 1.0] {
        let x = random_points(8, d, 1.5, 2);
        let mu = effective_drift(&bench.problem, Some(&model), &x, t).unwrap();
        let expected = x.mapv(|v| 2.0 + (v - 2.0 * t) / (2.0 * (t + 1.0)));
        assert!(max_abs((&mu - &expected).iter().copied()) < 1e-12);
        let state = AugmentedState::new(x, Array1::zeros(8)).unwrap();
        let (_, dl) = augmented_dynamics(&bench.problem, Some(&model), &state, t).unwrap();
        let want = -(d as f64) / (2.0 * (t + 1.0));
        assert!(max_abs(dl.iter().map(|v| v - want)) < 1e-12);
    }
    let origin = AugmentedState::new(Array2::zeros((1, d)), Array1::zeros(1)).unwrap();
    let (_, dl) = augmented_dynamics(&bench.problem, Some(&model), &origin, 0.0).unwrap();
    assert!((dl[0] + 5.0).abs() < 1e-12);
}

#[test]
fn stationary_solution_is_a_fixed_point() {
    let bench = sfp_ou_problem(5, 1.3, 0.8).unwrap();
    let model = AnalyticModel::new(bench.solution);
    let x = random_points(20, 5, 1.0, 4);
    let mu = effective_drift(&bench.problem, Some(&model), &x, 0.0).unwrap();
    assert!(max_abs(mu.iter().copied()) < 1e-10);
    let state = AugmentedState::new(x.clone(), Array1::zeros(20)).unwrap();
    let (_, dl) = augmented_dynamics(&bench.problem, Some(&model), &state, 0.0).unwrap();
    assert!(max_abs(dl.iter().copied()) < 1e-10);
    for c in [1.0, 7.5, std::f64::consts::E] {
        let (dmu, ddiv) = scale_invariance_check(&bench.problem, &model, c, &x, 0.0).unwrap();
        assert!(dmu <= 1e-12 && ddiv <= 1e-12, "c = {c}: {dmu} {ddiv}");
    }
}

#[test]
fn scale_invariance_for_trained_style_models() {
    let bench = tfp_gauss_problem(3).unwrap();
    let model = random_tfp(3, 9);
    let x = random_points(30, 3, 1.0, 5);
    for c in [1.0, 7.5, std::f64::consts::E] {
        let (dmu, ddiv) = scale_invariance_check(&bench.problem, &model, c, &x, 0.6).unwrap();
        assert!(dmu <= 1e-12 && ddiv <= 1e-12, "c = {c}: {dmu} {ddiv}");
    }
    let skew = skew_problem(3);
    let (dmu, ddiv) = scale_invariance_check(&skew, &model, 7.5, &x, 0.6).unwrap();
    assert!(dmu <= 1e-12 && ddiv <= 1e-12);
    assert!(scale_invariance_check(&skew, &model, 0.0, &x, 0.6).is_err());
}

#[test]
fn missing_model_with_diffusion_is_a_config_error() {
    let bench = tfp_gauss_problem(2).unwrap();
    let x = random_points(3, 2, 1.0, 6);
    assert!(matches!(effective_drift(&bench.problem, None, &x, 0.0), Err(Error::Config(_))));
}

#[test]
fn model_dimension_mismatch_is_a_shape_error() {
    let bench = tfp_gauss_problem(3).unwrap();
    let model = random_tfp(2, 1);
    let x = random_points(3, 3, 1.0, 6);
    assert!(matches!(
        effective_drift(&bench.problem, Some(&model), &x, 0.0),
        Err(Error::Shape { .. })
    ));
    let bad = random_points(3, 2, 1.0, 6);
    assert!(matches!(effective_drift(&bench.problem, None, &bad, 0.0), Err(Error::Shape { .. })));
}

/// `−∇·μ*` from the augmented dynamics against central differences of `μ*`.
fn check_divergence(problem: &FpProblem, model: &dyn LogDensityModel, x: &Array2<f64>, t: f64) {
    let d = problem.dim;
    let state = AugmentedState::new(x.clone(), Array1::zeros(x.nrows())).unwrap();
    let (mu, dl) = augmented_dynamics(problem, Some(model), &state, t).unwrap();
    let f = |p: &[f64]| {
        let row = Array2::from_shape_vec((1, d), p.to_vec()).unwrap();
        effective_drift(problem, Some(model), &row, t).unwrap().row(0).to_vec()
    };
    let mut worst = 0.0f64;
    for b in 0..x.nrows() {
        let fd_div = fd::divergence(f, x.row(b).as_slice().unwrap(), 1e-5);
        worst = worst.max((-dl[b] - fd_div).abs() / (1.0 + fd_div.abs()));
    }
    assert!(worst < 1e-4, "{}: divergence mismatch {worst}", problem.name);
    assert_eq!(mu.dim(), (x.nrows(), d));
}

#[test]
fn divergence_consistency_constant_diffusion() {
    let d = 4;
    let bench = tfp_gauss_problem(d).unwrap();
    let model = random_tfp(d, 11);
    check_divergence(&bench.problem, &model, &random_points(100, d, 1.0, 7), 0.7);

    let mut m = Array2::<f64>::eye(d) * 0.8;
    m[[0, 1]] = 0.3;
    m[[1, 0]] = 0.3;
    m[[2, 3]] = -0.2;
    m[[3, 2]] = -0.2;
    let aniso = FpProblem {
        name: "anisotropic".into(),
        dim: d,
        drift: Arc::new(UniformDrift { base: 0.5, rate: 1.0 }),
        diffusion: Diffusion::constant(m).unwrap(),
        initial: Some(GaussianDensity::standard(d)),
        horizon: Some(1.0),
    };
    check_divergence(&aniso, &model, &random_points(100, d, 1.0, 8), 0.3);
}

#[test]
fn divergence_consistency_state_dependent_diffusion() {
    let d = 3;
    let model = random_tfp(d, 21);
    check_divergence(&skew_problem(d), &model, &random_points(100, d, 1.0, 9), 0.5);
    let mut flow = CouplingFlow::new(d, FlowConfig { layers: 2, hidden: 8, s_max: None }, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    randomize(&mut flow, 0.2, 3);
    check_divergence(&skew_problem(d), &flow, &random_points(100, d, 1.0, 10), 0.0);
}
