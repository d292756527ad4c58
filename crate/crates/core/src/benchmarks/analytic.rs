use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffengine::{ensure_finite, jet, Bindings, Graph, Jet, JetOrder, Tensor, VariableSet};
use crate::error::{Error, Result};
use crate::fpcore::{Diffusion, FpProblem};
use crate::networks::{Architecture, Checkpoint, GaussianDensity, LogDensityModel};

/// Closed-form solutions of the built-in problems. Each is an isotropic
/// Gaussian `N(m(t)·1, v(t)·I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnalyticSolution {
    /// `p₀(x − t²·1)` with `p₀ = N(−1, I)`.
    Toy { dim: usize },
    /// `N(2t·1, (t+1)·I)`.
    Gauss { dim: usize },
    /// Stationary `N(0, σ²/(2a)·I)`.
    Ou { dim: usize, a: f64, sigma: f64 },
}

impl AnalyticSolution {
    pub fn dim(&self) -> usize {
        match *self {
            AnalyticSolution::Toy { dim } | AnalyticSolution::Gauss { dim } | AnalyticSolution::Ou { dim, .. } => dim,
        }
    }

    /// Per-coordinate mean and variance at time `t`.
    pub fn mean_var(&self, t: f64) -> (f64, f64) {
        match *self {
            AnalyticSolution::Toy { .. } => (t * t - 1.0, 1.0),
            AnalyticSolution::Gauss { .. } => (2.0 * t, t + 1.0),
            AnalyticSolution::Ou { a, sigma, .. } => (0.0, sigma * sigma / (2.0 * a)),
        }
    }

    pub fn density_at(&self, t: f64) -> GaussianDensity {
        let (m, v) = self.mean_var(t);
        GaussianDensity {
            mean: vec![m; self.dim()],
            var: v,
        }
    }

    pub fn log_density_point(&self, x: &[f64], t: f64) -> f64 {
        self.density_at(t).log_density_point(x)
    }

    pub fn log_density(&self, x: &Array2<f64>, t: f64) -> Array1<f64> {
        self.density_at(t).log_density(x)
    }

    /// `(m(t), v(t))` as B×1 nodes of the time column.
    fn mean_var_tape(&self, g: &mut Graph, t: Tensor) -> (Tensor, Tensor) {
        let b = g.shape(t).0;
        match *self {
            AnalyticSolution::Toy { .. } => {
                let t2 = g.square(t);
                (g.offset(t2, -1.0), g.filled(b, 1, 1.0))
            }
            AnalyticSolution::Gauss { .. } => (g.scale(t, 2.0), g.offset(t, 1.0)),
            AnalyticSolution::Ou { .. } => {
                let (_, v) = self.mean_var(0.0);
                (g.filled(b, 1, 0.0), g.filled(b, 1, v))
            }
        }
    }

    /// Log-density jet with the time column on the tape, so `∂ₜ` is available too.
    pub fn log_density_jet(&self, g: &mut Graph, x: &Jet, t: Tensor) -> Jet {
        let d = x.width(g);
        let (m, v) = self.mean_var_tape(g, t);
        let shift = g.broadcast_cols(m, d);
        let shift = g.neg(shift);
        let centred = jet::add(g, x, &Jet::constant(shift, x.dirs, JetOrder::Value));
        let sq = jet::activation(g, &centred, jet::Activation::Square);
        let sq = jet::sum_cols(g, &sq);
        let two_v = g.scale(v, 2.0);
        let ones = g.filled(g.shape(v).0, 1, 1.0);
        let inv = g.div(ones, two_v);
        let coef = g.neg(inv);
        let quad = jet::mul_col(g, &sq, coef);
        let norm = g.scale(v, 2.0 * std::f64::consts::PI);
        let norm = g.ln(norm);
        let norm = g.scale(norm, -0.5 * d as f64);
        jet::add(g, &quad, &Jet::constant(norm, x.dirs, JetOrder::Value))
    }

    /// Probability mass of one coordinate's marginal in `[lo, hi]`, divided by the width.
    pub fn marginal_bin_average(&self, lo: f64, hi: f64, t: f64) -> f64 {
        let (m, v) = self.mean_var(t);
        let n = Normal::new(m, v.sqrt()).expect("valid normal");
        (n.cdf(hi) - n.cdf(lo)) / (hi - lo)
    }

    /// Mass of the joint marginal of two coordinates over a rectangle, divided by its area.
    pub fn marginal_bin_average_2d(&self, x: (f64, f64), y: (f64, f64), t: f64) -> f64 {
        self.marginal_bin_average(x.0, x.1, t) * self.marginal_bin_average(y.0, y.1, t)
    }

    pub fn marginal_pdf(&self, x: f64, t: f64) -> f64 {
        let (m, v) = self.mean_var(t);
        (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }
}

/// An [`AnalyticSolution`] seen as a parameter-free log-density model.
#[derive(Clone, Debug)]
pub struct AnalyticModel {
    pub solution: AnalyticSolution,
    empty: VariableSet,
}

impl AnalyticModel {
    pub fn new(solution: AnalyticSolution) -> Self {
        Self {
            solution,
            empty: VariableSet::new(),
        }
    }
}

impl LogDensityModel for AnalyticModel {
    fn dim(&self) -> usize {
        self.solution.dim()
    }

    fn params(&self) -> &VariableSet {
        &self.empty
    }

    fn params_mut(&mut self) -> &mut VariableSet {
        &mut self.empty
    }

    fn log_density_jet(&self, g: &mut Graph, _p: &Bindings, x: &Jet, t: Tensor) -> Jet {
        self.solution.log_density_jet(g, x, t)
    }

    /// Analytic models have no parameters; the checkpoint records the time-`0` Gaussian only.
    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            Architecture::Potential {
                dim: self.dim(),
                layers: 0,
                width: 0,
                rank: 0,
                initial: self.solution.density_at(0.0),
            },
            &self.empty,
        )
    }
}

/// Residual of the Fokker–Planck equation divided by `p`, at the rows of `x`:
///
/// ```text
/// ∂ₜlog p + ∇·μ + μ·∇log p − Σᵢⱼ Dᵢⱼ(∂ᵢⱼlog p + ∂ᵢlog p ∂ⱼlog p)
/// ```
///
/// All derivatives are exact. Requires constant or zero diffusion.
pub fn fp_residual(problem: &FpProblem, solution: &AnalyticSolution, x: &Array2<f64>, t: f64) -> Result<Array1<f64>> {
    problem.validate()?;
    if solution.dim() != problem.dim || x.ncols() != problem.dim {
        return Err(Error::shape("fp_residual", problem.dim, x.ncols()));
    }
    let (b, d) = x.dim();
    let mut g = Graph::new();
    let xt = g.constant(x.clone());
    let tt = g.param(Array2::from_elem((b, 1), t));
    let mu = problem.drift.drift(&mut g, xt, tt);
    let div_mu = problem.drift.divergence(&mut g, xt, tt);
    let xj = Jet::seed_identity(&mut g, xt, JetOrder::Gradient);
    let lp = solution.log_density_jet(&mut g, &xj, tt);
    let grad = lp.directional(&mut g);
    let s = g.sum_all(lp.val);
    let dt = g.backward(s, &[tt]).remove(0);

    let mu_grad = g.mul(mu, grad);
    let mu_grad = g.sum_cols(mu_grad);
    let mut rhs = g.value(div_mu) + g.value(mu_grad);
    match &problem.diffusion {
        Diffusion::Zero => {}
        Diffusion::Constant { factor, .. } => {
            let seeds = factor.t().to_owned();
            let xc = Jet::seed_shared(&mut g, xt, &seeds, JetOrder::Laplacian);
            let lc = solution.log_density_jet(&mut g, &xc, tt);
            let tr = lc.laplacian(&mut g);
            let q = lc.directional(&mut g);
            let q2 = g.square(q);
            let q2 = g.sum_cols(q2);
            rhs = rhs - g.value(tr) - g.value(q2);
        }
        Diffusion::Field(_) => {
            return Err(Error::Config("fp_residual supports constant diffusion only".into()));
        }
    }
    ensure_finite(&g)?;
    debug_assert_eq!(g.shape(grad), (b, d));
    Ok((dt + rhs).column(0).to_owned())
}
