use ndarray::{Array1, Array2};

use super::{AugmentedState, Diffusion, FpProblem};
use crate::diffengine::{ensure_finite, jet, Bindings, Graph, Jet, JetOrder, Tensor};
use crate::error::{Error, Result};
use crate::networks::LogDensityModel;
use crate::odesolve::{ode_solve, SolverConfig};

/// A log-density model together with its parameters bound on the current graph.
#[derive(Clone, Copy)]
pub struct ModelRef<'a> {
    pub model: &'a dyn LogDensityModel,
    pub params: &'a Bindings,
}

/// Effective drift `μ*` on the tape (B×d).
pub fn effective_drift_tape(
    g: &mut Graph,
    problem: &FpProblem,
    model: Option<ModelRef<'_>>,
    x: Tensor,
    t: Tensor,
) -> Result<Tensor> {
    Ok(characteristic(g, problem, model, x, t, false, 0.0)?.0)
}

/// Right-hand side of the augmented system: `(μ*, −∇·μ*)` as B×d and B×1 nodes.
/// The divergence is taken in `x` with the model parameters held fixed.
pub fn augmented_dynamics_tape(
    g: &mut Graph,
    problem: &FpProblem,
    model: Option<ModelRef<'_>>,
    x: Tensor,
    t: Tensor,
) -> Result<(Tensor, Tensor)> {
    let (dx, dl) = characteristic(g, problem, model, x, t, true, 0.0)?;
    Ok((dx, dl.expect("divergence requested")))
}

fn require_model<'a>(problem: &FpProblem, model: Option<ModelRef<'a>>) -> Result<ModelRef<'a>> {
    let m = model.ok_or_else(|| {
        Error::Config(format!(
            "problem `{}` has non-zero diffusion and needs a log-density model",
            problem.name
        ))
    })?;
    if m.model.dim() != problem.dim {
        return Err(Error::shape("log-density model", problem.dim, m.model.dim()));
    }
    Ok(m)
}

fn characteristic(
    g: &mut Graph,
    problem: &FpProblem,
    model: Option<ModelRef<'_>>,
    x: Tensor,
    t: Tensor,
    with_div: bool,
    shift: f64,
) -> Result<(Tensor, Option<Tensor>)> {
    let (b, d) = g.shape(x);
    if d != problem.dim {
        return Err(Error::shape("characteristic state", problem.dim, d));
    }
    if g.shape(t) != (b, 1) {
        return Err(Error::shape("time column", format!("({b}, 1)"), format!("{:?}", g.shape(t))));
    }
    let mu = problem.drift.drift(g, x, t);
    let neg_div_mu = if with_div {
        let dm = problem.drift.divergence(g, x, t);
        Some(g.neg(dm))
    } else {
        None
    };
    let order = if with_div { JetOrder::Laplacian } else { JetOrder::Gradient };
    match &problem.diffusion {
        Diffusion::Zero => Ok((mu, neg_div_mu)),
        Diffusion::Constant { factor, .. } => {
            let m = require_model(problem, model)?;
            let seeds = factor.t().to_owned();
            let xj = Jet::seed_shared(g, x, &seeds, order);
            let lp = m.model.log_density_jet(g, m.params, &xj, t);
            let lp = jet::offset(g, &lp, shift);
            // q = Cᵀ∇log p per sample; D∇log p = C q.
            let q = lp.directional(g);
            let ct = g.constant(seeds);
            let corr = g.matmul(q, ct);
            let mustar = g.sub(mu, corr);
            let dl = neg_div_mu.map(|n| {
                let tr = lp.laplacian(g);
                g.add(n, tr)
            });
            Ok((mustar, dl))
        }
        Diffusion::Field(field) => {
            let m = require_model(problem, model)?;
            let k = field.rank();
            let xg = Jet::seed_identity(g, x, JetOrder::Gradient);
            let lp = m.model.log_density_jet(g, m.params, &xg, t);
            let lp = jet::offset(g, &lp, shift);
            let grad = lp.directional(g);
            let c = field.factor(g, x, t);
            let rep = g.repeat_rows(grad, k);
            let proj = g.mul(rep, c);
            let q = g.sum_cols(proj);
            let scaled = g.mul_col(c, q);
            let dgrad = g.group_sum(scaled, k);
            let rowdiv = field.row_divergence(g, x, t);
            let mustar = g.sub(mu, dgrad);
            let mustar = g.sub(mustar, rowdiv);
            let dl = match neg_div_mu {
                Some(n) => {
                    let xc = Jet::seed(g, x, c, k, JetOrder::Laplacian);
                    let lc = m.model.log_density_jet(g, m.params, &xc, t);
                    let tr = lc.laplacian(g);
                    let cross = g.mul(rowdiv, grad);
                    let cross = g.sum_cols(cross);
                    let ddd = field.row_divergence_divergence(g, x, t);
                    let s = g.add(n, tr);
                    let s = g.add(s, cross);
                    Some(g.add(s, ddd))
                }
                None => None,
            };
            Ok((mustar, dl))
        }
    }
}

struct Eval {
    dx: Array2<f64>,
    dlogp: Array1<f64>,
}

fn evaluate(
    problem: &FpProblem,
    model: Option<&dyn LogDensityModel>,
    x: &Array2<f64>,
    t: f64,
    with_div: bool,
    shift: f64,
) -> Result<Eval> {
    problem.check_batch("effective_drift", x)?;
    let mut g = Graph::new();
    let bindings = model.map(|m| m.params().bind(&mut g, false));
    let mref = model.zip(bindings.as_ref()).map(|(model, params)| ModelRef { model, params });
    let xt = g.constant(x.clone());
    let tt = g.filled(x.nrows(), 1, t);
    let (dx, dl) = characteristic(&mut g, problem, mref, xt, tt, with_div, shift)?;
    ensure_finite(&g).map_err(|e| e.with_time(t))?;
    Ok(Eval {
        dx: g.value(dx).clone(),
        dlogp: dl.map_or_else(|| Array1::zeros(x.nrows()), |d| g.value(d).column(0).to_owned()),
    })
}

/// `μ*(x, t)` at the rows of `x`.
pub fn effective_drift(
    problem: &FpProblem,
    model: Option<&dyn LogDensityModel>,
    x: &Array2<f64>,
    t: f64,
) -> Result<Array2<f64>> {
    Ok(evaluate(problem, model, x, t, false, 0.0)?.dx)
}

/// `(dx/dt, d log p/dt) = (μ*, −∇·μ*)` at a batch of states.
pub fn augmented_dynamics(
    problem: &FpProblem,
    model: Option<&dyn LogDensityModel>,
    state: &AugmentedState,
    t: f64,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let e = evaluate(problem, model, &state.x, t, true, 0.0)?;
    Ok((e.dx, e.dlogp))
}

/// Max-norm differences of `μ*` and `−∇·μ*` between `log p` and `log p + log c`.
pub fn scale_invariance_check(
    problem: &FpProblem,
    model: &dyn LogDensityModel,
    c: f64,
    x: &Array2<f64>,
    t: f64,
) -> Result<(f64, f64)> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("scale constant must be positive, got {c}")));
    }
    let base = evaluate(problem, Some(model), x, t, true, 0.0)?;
    let shifted = evaluate(problem, Some(model), x, t, true, c.ln())?;
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    Ok((
        max_diff(base.dx.as_slice().expect("contiguous"), shifted.dx.as_slice().expect("contiguous")),
        max_diff(base.dlogp.as_slice().expect("contiguous"), shifted.dlogp.as_slice().expect("contiguous")),
    ))
}

/// `log p(x′, t′)` by integrating the characteristics from `(x′, t′)` back to
/// `t = 0` and correcting `log p₀` at the foot point. No training is involved;
/// with zero diffusion no model is needed.
pub fn predict_log_density(
    problem: &FpProblem,
    model: Option<&dyn LogDensityModel>,
    x: &Array2<f64>,
    t: f64,
    solver: &SolverConfig,
) -> Result<Array1<f64>> {
    let p0 = problem
        .initial
        .as_ref()
        .ok_or_else(|| Error::Config(format!("problem `{}` has no initial density", problem.name)))?;
    problem.check_batch("predict_log_density", x)?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("prediction time must be non-negative, got {t}")));
    }
    if model.is_none() && !problem.is_zero_diffusion() {
        return Err(Error::Config(format!(
            "problem `{}` has non-zero diffusion and needs a log-density model",
            problem.name
        )));
    }
    let start = AugmentedState::new(x.clone(), Array1::zeros(x.nrows()))?;
    let f = |g: &mut Graph, s: f64, xs: Tensor, _l: Tensor| {
        let bindings = model.map(|m| m.params().bind(g, false));
        let mref = model.zip(bindings.as_ref()).map(|(model, params)| ModelRef { model, params });
        let tt = g.filled(g.shape(xs).0, 1, s);
        augmented_dynamics_tape(g, problem, mref, xs, tt)
    };
    let foot = ode_solve(f, &start, t, 0.0, solver)?;
    Ok(p0.log_density(&foot.x) - &foot.logp)
}
