//! Reference problems with closed-form solutions and a particle simulator.

mod analytic;
mod histogram;
mod sde;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use analytic::{fp_residual, AnalyticModel, AnalyticSolution};
pub use histogram::{histogram_density, Histogram};
pub use sde::{euler_maruyama, ParticleCloud};

use crate::error::{Error, Result};
use crate::fpcore::{Diffusion, FpProblem, LinearRestoringDrift, UniformDrift};
use crate::networks::GaussianDensity;

pub const PROBLEM_NAMES: [&str; 3] = ["toy", "tfp-gauss", "sfp-ou"];

/// Overrides for the built-in problems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemParams {
    pub dim: usize,
    /// Restoring rate of `sfp-ou`.
    #[serde(default = "one")]
    pub a: f64,
    /// Noise amplitude of `sfp-ou`, `D = σ²/2·I`.
    #[serde(default = "one")]
    pub sigma: f64,
    /// Final time of the time-dependent problems.
    #[serde(default)]
    pub horizon: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl ProblemParams {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            a: 1.0,
            sigma: 1.0,
            horizon: None,
        }
    }
}

/// A problem together with its exact solution.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub problem: FpProblem,
    pub solution: AnalyticSolution,
}

/// Zero diffusion, `μ = 2t·1`, `p₀ = N(−1, I)`.
pub fn toy_problem(dim: usize) -> Result<Benchmark> {
    build_problem("toy", &ProblemParams::new(dim))
}

/// `D = ½I`, `μ = 2·1`, `p₀ = N(0, I)`.
pub fn tfp_gauss_problem(dim: usize) -> Result<Benchmark> {
    build_problem("tfp-gauss", &ProblemParams::new(dim))
}

/// Stationary Ornstein–Uhlenbeck: `μ = −a·x`, `D = σ²/2·I`.
pub fn sfp_ou_problem(dim: usize, a: f64, sigma: f64) -> Result<Benchmark> {
    build_problem(
        "sfp-ou",
        &ProblemParams {
            a,
            sigma,
            ..ProblemParams::new(dim)
        },
    )
}

/// Looks up a built-in problem by name.
pub fn build_problem(name: &str, params: &ProblemParams) -> Result<Benchmark> {
    let d = params.dim;
    if d == 0 {
        return Err(Error::Config("problem dimension must be at least 1".into()));
    }
    let horizon = params.horizon.unwrap_or(1.0);
    let bench = match name {
        "toy" => Benchmark {
            problem: FpProblem {
                name: name.into(),
                dim: d,
                drift: Arc::new(UniformDrift { base: 0.0, rate: 2.0 }),
                diffusion: Diffusion::Zero,
                initial: Some(GaussianDensity::new(vec![-1.0; d], 1.0)?),
                horizon: Some(horizon),
            },
            solution: AnalyticSolution::Toy { dim: d },
        },
        "tfp-gauss" => Benchmark {
            problem: FpProblem {
                name: name.into(),
                dim: d,
                drift: Arc::new(UniformDrift { base: 2.0, rate: 0.0 }),
                diffusion: Diffusion::isotropic(d, 0.5)?,
                initial: Some(GaussianDensity::standard(d)),
                horizon: Some(horizon),
            },
            solution: AnalyticSolution::Gauss { dim: d },
        },
        "sfp-ou" => {
            let (a, sigma) = (params.a, params.sigma);
            if !(a > 0.0 && sigma > 0.0 && a.is_finite() && sigma.is_finite()) {
                return Err(Error::Config(format!("sfp-ou needs a > 0 and sigma > 0, got a = {a}, sigma = {sigma}")));
            }
            Benchmark {
                problem: FpProblem {
                    name: name.into(),
                    dim: d,
                    drift: Arc::new(LinearRestoringDrift { a }),
                    diffusion: Diffusion::isotropic(d, 0.5 * sigma * sigma)?,
                    initial: None,
                    horizon: None,
                },
                solution: AnalyticSolution::Ou { dim: d, a, sigma },
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown problem `{other}` (known: {})",
                PROBLEM_NAMES.join(", ")
            )))
        }
    };
    bench.problem.validate()?;
    Ok(bench)
}
