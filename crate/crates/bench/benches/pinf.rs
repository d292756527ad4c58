use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use fpflow::benchmarks::{euler_maruyama, sfp_ou_problem, tfp_gauss_problem, toy_problem, ParticleCloud};
use fpflow::diffengine::hessian_trace;
use fpflow::fpcore::{augmented_dynamics, predict_log_density, AugmentedState};
use fpflow::networks::{laplacian_logp, LogDensityModel};
use fpflow::odesolve::SolverConfig;
use fpflow::training::{train_sfp, train_tfp, TrainConfig};
use fpflow::{Jet, JetOrder};
use fpflow_bench::{coupling_flow, points, potential_model};
use ndarray::Array1;

fn laplacian(c: &mut Criterion) {
    let mut group = c.benchmark_group("laplacian");
    for d in [2, 10] {
        let model = potential_model(d, 1);
        let x = points(256, d, 2);
        group.bench_function(format!("jet d={d}"), |b| b.iter(|| laplacian_logp(&model, black_box(&x), 0.5).unwrap()));
        group.bench_function(format!("reverse-over-reverse d={d}"), |b| {
            b.iter(|| {
                hessian_trace(
                    |g, xt| {
                        let p = model.params().bind(g, false);
                        let tt = g.filled(256, 1, 0.5);
                        Ok(model.log_density_jet(g, &p, &Jet::constant(xt, 0, JetOrder::Value), tt).val)
                    },
                    black_box(&x),
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn dynamics(c: &mut Criterion) {
    let bench = tfp_gauss_problem(10).unwrap();
    let model = potential_model(10, 3);
    let state = AugmentedState::new(points(256, 10, 4), Array1::zeros(256)).unwrap();
    c.bench_function("augmented dynamics d=10 b=256", |b| {
        b.iter(|| augmented_dynamics(&bench.problem, Some(&model), black_box(&state), 0.5).unwrap())
    });
}

fn prediction(c: &mut Criterion) {
    let toy = toy_problem(10).unwrap();
    let x = points(1000, 10, 5);
    c.bench_function("zero-diffusion predict d=10 n=1000", |b| {
        b.iter(|| predict_log_density(&toy.problem, None, black_box(&x), 1.0, &SolverConfig::default()).unwrap())
    });
    let gauss = tfp_gauss_problem(2).unwrap();
    let model = potential_model(2, 6);
    let x = points(100, 2, 7);
    c.bench_function("model predict d=2 n=100", |b| {
        b.iter(|| predict_log_density(&gauss.problem, Some(&model), black_box(&x), 1.0, &SolverConfig::rk4(20)).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("training iteration");
    group.sample_size(10);
    let cfg = TrainConfig {
        iterations: 1,
        batch: 200,
        ..TrainConfig::default()
    };
    let gauss = tfp_gauss_problem(2).unwrap();
    group.bench_function("tfp d=2 b=200", |b| {
        b.iter_batched(
            || potential_model(2, 8),
            |mut m| train_tfp(&gauss.problem, &mut m, &cfg, &SolverConfig::rk4(20)).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let ou = sfp_ou_problem(10, 1.0, 1.0).unwrap();
    group.bench_function("sfp d=10 b=200", |b| {
        b.iter_batched(
            || coupling_flow(10, 9),
            |mut f| train_sfp(&ou.problem, &mut f, &cfg, &SolverConfig::rk4(20)).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn particles(c: &mut Criterion) {
    let ou = sfp_ou_problem(1, 1.0, 1.0).unwrap();
    let cloud = ParticleCloud::new(points(10_000, 1, 10), 0.0, 11).unwrap();
    c.bench_function("euler-maruyama 1e4 particles 100 steps", |b| {
        b.iter(|| euler_maruyama(&ou.problem, black_box(&cloud), 1e-2, 1.0).unwrap())
    });
}

criterion_group!(benches, laplacian, dynamics, prediction, training, particles);
criterion_main!(benches);
