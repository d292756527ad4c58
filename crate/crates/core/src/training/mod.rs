//! Self-supervised training loops.
//!
//! Each iteration transports a fresh mini-batch along the characteristics of
//! the current model and regresses the model's own log-density onto the
//! transported values:
//!
//! ```text
//! loss = mean_k (log p_ode(x_k) − φ_θ(x_k, t_k))²
//! ```
//!
//! [`train_tfp`] starts from samples of `p₀` at `t = 0`; [`train_sfp`] starts
//! from pushforwards of latent normal samples through a coupling flow.

mod adam;

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;

use crate::diffengine::{ensure_finite, Bindings, Graph, Jet, JetOrder, Tensor};
use crate::error::{Error, Result};
use crate::fpcore::{augmented_dynamics_tape, FpProblem, ModelRef};
use crate::networks::{Checkpoint, CouplingFlow, GaussianDensity, LogDensityModel, LogDensityTfp};
use crate::odesolve::{rk4_tape, SolverConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch: usize,
    /// Final time for time-dependent problems (defaults to the problem's),
    /// transport length for stationary ones (defaults to 1).
    pub horizon: Option<f64>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Treat the transported log-density as a constant target.
    pub detach_ode_target: bool,
    /// Draw one time per sample instead of one per mini-batch.
    pub per_sample_times: bool,
    /// Samples per micro-batch; `0` processes the batch at once. The loss and
    /// gradient do not depend on it beyond rounding.
    pub chunk: usize,
    pub max_consecutive_failures: usize,
    /// Write a checkpoint every this many iterations; `0` disables.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.01,
            batch: 2000,
            horizon: None,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            detach_ode_target: false,
            per_sample_times: false,
            chunk: 250,
            max_consecutive_failures: 5,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            problems.push("train.batch must be at least 1".to_string());
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0 && h.is_finite()) {
                problems.push(format!("train.horizon must be positive, got {h}"));
            }
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            problems.push(format!("Adam betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            problems.push(format!("Adam epsilon must be positive, got {}", self.eps));
        }
        if self.max_consecutive_failures == 0 {
            problems.push("train.max-consecutive-failures must be at least 1".to_string());
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            problems.push("train.checkpoint-every needs train.checkpoint-path".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        let size = if self.chunk == 0 { self.batch } else { self.chunk.min(self.batch) };
        (0..self.batch).step_by(size).map(|a| (a, (a + size).min(self.batch))).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SkippedBatch {
    pub iteration: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainTrace {
    /// Loss of each completed iteration, before its update.
    pub losses: Vec<f64>,
    /// Wall-clock seconds of each completed iteration.
    pub seconds: Vec<f64>,
    pub skipped: Vec<SkippedBatch>,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainTrace {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Loss value and parameter gradients of one mini-batch.
type BatchResult = Result<(f64, Vec<Array2<f64>>)>;

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::NumericFailure { .. } | Error::Divergence { .. })
}

fn run_loop<M, F>(model: &mut M, cfg: &TrainConfig, mut batch_loss: F) -> Result<TrainTrace>
where
    M: LogDensityModel,
    F: FnMut(&M, &mut ChaCha8Rng) -> BatchResult,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)?;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut seconds = Vec::with_capacity(cfg.iterations);
    let mut skipped = Vec::new();
    let mut consecutive = 0;
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let outcome = batch_loss(model, &mut rng).and_then(|(loss, grads)| {
            if loss.is_finite() {
                Ok((loss, grads))
            } else {
                Err(Error::numeric("loss"))
            }
        });
        match outcome {
            Ok((loss, grads)) => {
                adam.step(model.params_mut(), &grads)?;
                losses.push(loss);
                seconds.push(start.elapsed().as_secs_f64());
                consecutive = 0;
            }
            Err(e) if recoverable(&e) => {
                consecutive += 1;
                skipped.push(SkippedBatch {
                    iteration: it,
                    reason: e.to_string(),
                });
                if consecutive >= cfg.max_consecutive_failures {
                    return Err(Error::TrainingAborted {
                        iteration: it,
                        failures: consecutive,
                        source: Box::new(e),
                    });
                }
            }
            Err(e) => return Err(e),
        }
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            if let Some(path) = &cfg.checkpoint_path {
                model.checkpoint().save(path)?;
            }
        }
    }
    let checkpoint = model.checkpoint();
    if let Some(path) = &cfg.checkpoint_path {
        checkpoint.save(path)?;
    }
    Ok(TrainTrace {
        losses,
        seconds,
        skipped,
        checkpoint,
        checkpoint_path: cfg.checkpoint_path.clone(),
    })
}

fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column")
}

/// Squared residual summed over a chunk and divided by the full batch size.
fn chunk_loss(g: &mut Graph, l_ode: Tensor, l_net: Tensor, batch: usize) -> Tensor {
    let r = g.sub(l_ode, l_net);
    let r2 = g.square(r);
    let s = g.sum_all(r2);
    g.scale(s, 1.0 / batch as f64)
}

/// Binds the parameters twice when the ODE branch is detached.
fn bind(model: &dyn LogDensityModel, g: &mut Graph, detach: bool) -> (Bindings, Bindings) {
    let train = model.params().bind(g, true);
    let ode = if detach { model.params().bind(g, false) } else { train.clone() };
    (train, ode)
}

fn accumulate(total: &mut Option<Vec<Array2<f64>>>, grads: Vec<Array2<f64>>) {
    match total {
        None => *total = Some(grads),
        Some(acc) => acc.iter_mut().zip(grads).for_each(|(a, g)| *a += &g),
    }
}

/// Trains a time-dependent model on a problem with an initial density.
pub fn train_tfp(
    problem: &FpProblem,
    model: &mut LogDensityTfp,
    cfg: &TrainConfig,
    solver: &SolverConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    solver.validate()?;
    problem.validate()?;
    let p0 = problem
        .initial
        .clone()
        .ok_or_else(|| Error::Config(format!("problem `{}` has no initial density", problem.name)))?;
    if model.dim() != problem.dim {
        return Err(Error::shape("train_tfp model", problem.dim, model.dim()));
    }
    if model.initial != p0 {
        return Err(Error::Config("model initial density differs from the problem's".into()));
    }
    let horizon = cfg
        .horizon
        .or(problem.horizon)
        .ok_or_else(|| Error::Config("train.horizon is required for this problem".into()))?;
    let chunks = cfg.chunks();
    let steps = solver.steps;

    run_loop(model, cfg, |model, rng| {
        let times: Vec<f64> = if cfg.per_sample_times {
            (0..cfg.batch).map(|_| rng.gen_range(0.0..=horizon)).collect()
        } else {
            vec![rng.gen_range(0.0..=horizon); cfg.batch]
        };
        let x0 = p0.sample(cfg.batch, rng);
        let l0 = p0.log_density(&x0);
        let mut total = 0.0;
        let mut grads = None;
        for &(a, b) in &chunks {
            let n = b - a;
            let mut g = Graph::new();
            let (train, ode) = bind(model, &mut g, cfg.detach_ode_target);
            let xt = g.constant(x0.slice(s![a..b, ..]).to_owned());
            let lt = g.constant(column(&l0.as_slice().expect("contiguous")[a..b]));
            let tcol = g.constant(column(&times[a..b]));
            let mref = ModelRef { model, params: &ode };
            let (x1, l1) = if cfg.per_sample_times {
                // Rescaled clock s ∈ [0, 1] with t = s·t_k per sample.
                let mut f = |g: &mut Graph, s: f64, x: Tensor, _l: Tensor| {
                    let tt = g.scale(tcol, s);
                    let (dx, dl) = augmented_dynamics_tape(g, problem, Some(mref), x, tt)?;
                    Ok((g.mul_col(dx, tcol), g.mul(dl, tcol)))
                };
                rk4_tape(&mut g, &mut f, xt, lt, 0.0, 1.0, steps)?
            } else {
                let tk = times[a];
                let n_steps = ((steps as f64 * tk / horizon).ceil() as usize).max(1);
                let mut f = |g: &mut Graph, t: f64, x: Tensor, _l: Tensor| {
                    let tt = g.filled(n, 1, t);
                    augmented_dynamics_tape(g, problem, Some(mref), x, tt)
                };
                rk4_tape(&mut g, &mut f, xt, lt, 0.0, tk, n_steps)?
            };
            let xj = Jet::constant(x1, 0, JetOrder::Value);
            let l_net = model.log_density_jet(&mut g, &train, &xj, tcol).val;
            let loss = chunk_loss(&mut g, l1, l_net, cfg.batch);
            ensure_finite(&g)?;
            total += g.scalar(loss);
            accumulate(&mut grads, g.backward(loss, train.tensors()));
        }
        Ok((total, grads.expect("at least one chunk")))
    })
}

/// Trains a coupling flow towards the stationary density of a time-homogeneous problem.
pub fn train_sfp(
    problem: &FpProblem,
    flow: &mut CouplingFlow,
    cfg: &TrainConfig,
    solver: &SolverConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    solver.validate()?;
    problem.validate()?;
    if !problem.is_stationary() {
        return Err(Error::Config(format!("problem `{}` is not stationary", problem.name)));
    }
    if flow.dim() != problem.dim {
        return Err(Error::shape("train_sfp flow", problem.dim, flow.dim()));
    }
    let horizon = cfg.horizon.unwrap_or(1.0);
    let chunks = cfg.chunks();
    let steps = solver.steps;
    let latent = GaussianDensity::standard(problem.dim);

    run_loop(flow, cfg, |flow, rng| {
        let z = latent.sample(cfg.batch, rng);
        let lz = latent.log_density(&z);
        let mut total = 0.0;
        let mut grads = None;
        for &(a, b) in &chunks {
            let n = b - a;
            let mut g = Graph::new();
            let (train, ode) = bind(flow, &mut g, cfg.detach_ode_target);
            let zt = g.constant(z.slice(s![a..b, ..]).to_owned());
            let lzt = g.constant(column(&lz.as_slice().expect("contiguous")[a..b]));
            let (x0, l0) = flow.forward_tape(&mut g, &ode, zt, lzt);
            let mref = ModelRef {
                model: &*flow,
                params: &ode,
            };
            let mut f = |g: &mut Graph, t: f64, x: Tensor, _l: Tensor| {
                let tt = g.filled(n, 1, t);
                augmented_dynamics_tape(g, problem, Some(mref), x, tt)
            };
            let (x1, l1) = rk4_tape(&mut g, &mut f, x0, l0, 0.0, horizon, steps)?;
            let tt = g.filled(n, 1, horizon);
            let xj = Jet::constant(x1, 0, JetOrder::Value);
            let l_net = flow.log_density_jet(&mut g, &train, &xj, tt).val;
            let loss = chunk_loss(&mut g, l1, l_net, cfg.batch);
            ensure_finite(&g)?;
            total += g.scalar(loss);
            accumulate(&mut grads, g.backward(loss, train.tensors()));
        }
        Ok((total, grads.expect("at least one chunk")))
    })
}
