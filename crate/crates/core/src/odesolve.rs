//! Integrators for the augmented characteristic system `(x, log p)`.
//!
//! Dynamics are closures `f(g, t, x, logp) -> (dx/dt, dlogp/dt)` that build
//! their result on a [`Graph`]: `x` is B×d and `logp` is B×1.
//!
//! * [`Method::Rk4Fixed`]: classical Runge–Kutta on a uniform grid. Run on a
//!   single tape ([`rk4_tape`], [`ode_solve_with_grad`]) it is differentiable
//!   with respect to anything the dynamics depend on.
//! * [`Method::Dopri5Adaptive`]: Dormand–Prince 5(4) with max-norm error
//!   control, for prediction.
//!
//! Both integrate forward or backward in time.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::diffengine::{Bindings, Gradients, Graph, Tensor, VariableSet};
use crate::error::{Error, Result};
use crate::fpcore::AugmentedState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rk4Fixed,
    Dopri5Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SolverConfig {
    pub method: Method,
    /// Steps over the whole interval in fixed mode.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Attempted-step budget in adaptive mode.
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5Adaptive,
            steps: 20,
            rtol: 1e-6,
            atol: 1e-8,
            max_steps: 100_000,
        }
    }
}

impl SolverConfig {
    pub fn rk4(steps: usize) -> Self {
        Self {
            method: Method::Rk4Fixed,
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("solver.steps must be at least 1".to_string());
        }
        if !(self.rtol > 0.0 && self.rtol.is_finite()) {
            problems.push(format!("solver.rtol must be positive, got {}", self.rtol));
        }
        if !(self.atol > 0.0 && self.atol.is_finite()) {
            problems.push(format!("solver.atol must be positive, got {}", self.atol));
        }
        if self.max_steps == 0 {
            problems.push("solver.max_steps must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn check_interval(t0: f64, t1: f64) -> Result<()> {
    if !(t0.is_finite() && t1.is_finite()) {
        return Err(Error::Config(format!("integration endpoints must be finite, got [{t0}, {t1}]")));
    }
    Ok(())
}

/// Fails with the primitive and time if a dynamics output is non-finite.
fn check_stage(g: &Graph, outs: (Tensor, Tensor), t: f64) -> Result<()> {
    let bad = |x: Tensor| g.value(x).iter().any(|v| !v.is_finite());
    if bad(outs.0) || bad(outs.1) {
        let op = g.first_non_finite().map_or("dynamics", |(_, op)| op);
        return Err(Error::numeric(op).with_time(t));
    }
    Ok(())
}

fn axpy(g: &mut Graph, x: Tensor, k: Tensor, h: f64) -> Tensor {
    let hk = g.scale(k, h);
    g.add(x, hk)
}

fn rk4_step<F>(g: &mut Graph, f: &mut F, t: f64, h: f64, x: Tensor, l: Tensor) -> Result<(Tensor, Tensor)>
where
    F: FnMut(&mut Graph, f64, Tensor, Tensor) -> Result<(Tensor, Tensor)>,
{
    let k1 = f(g, t, x, l)?;
    check_stage(g, k1, t)?;
    let (x2, l2) = (axpy(g, x, k1.0, 0.5 * h), axpy(g, l, k1.1, 0.5 * h));
    let k2 = f(g, t + 0.5 * h, x2, l2)?;
    check_stage(g, k2, t + 0.5 * h)?;
    let (x3, l3) = (axpy(g, x, k2.0, 0.5 * h), axpy(g, l, k2.1, 0.5 * h));
    let k3 = f(g, t + 0.5 * h, x3, l3)?;
    check_stage(g, k3, t + 0.5 * h)?;
    let (x4, l4) = (axpy(g, x, k3.0, h), axpy(g, l, k3.1, h));
    let k4 = f(g, t + h, x4, l4)?;
    check_stage(g, k4, t + h)?;
    let combine = |g: &mut Graph, y: Tensor, a: Tensor, b: Tensor, c: Tensor, d: Tensor| {
        let bc = g.add(b, c);
        let bc = g.scale(bc, 2.0);
        let s = g.add(a, bc);
        let s = g.add(s, d);
        axpy(g, y, s, h / 6.0)
    };
    Ok((
        combine(g, x, k1.0, k2.0, k3.0, k4.0),
        combine(g, l, k1.1, k2.1, k3.1, k4.1),
    ))
}

/// `steps` RK4 steps from `t0` to `t1`, recorded on `g`. `steps = 0` or an
/// empty interval returns the inputs.
pub fn rk4_tape<F>(
    g: &mut Graph,
    f: &mut F,
    x0: Tensor,
    l0: Tensor,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<(Tensor, Tensor)>
where
    F: FnMut(&mut Graph, f64, Tensor, Tensor) -> Result<(Tensor, Tensor)>,
{
    check_interval(t0, t1)?;
    let (mut x, mut l) = (x0, l0);
    if steps == 0 || t0 == t1 {
        return Ok((x, l));
    }
    let h = (t1 - t0) / steps as f64;
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        (x, l) = rk4_step(g, f, t, h, x, l)?;
    }
    Ok((x, l))
}

fn logp_column(state: &AugmentedState) -> Array2<f64> {
    state.logp.clone().insert_axis(ndarray::Axis(1))
}

fn check_state(state: &AugmentedState) -> Result<()> {
    if state.logp.len() != state.x.nrows() {
        return Err(Error::shape("augmented state", state.x.nrows(), state.logp.len()));
    }
    if !state.is_finite() {
        return Err(Error::Config("initial state is not finite".into()));
    }
    Ok(())
}

/// Integrates the augmented system from `t0` to `t1`.
///
/// Fixed mode runs each step on a fresh graph, so memory does not grow with
/// the step count; the values are bit-identical to [`ode_solve_with_grad`].
pub fn ode_solve<F>(mut f: F, state0: &AugmentedState, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<AugmentedState>
where
    F: FnMut(&mut Graph, f64, Tensor, Tensor) -> Result<(Tensor, Tensor)>,
{
    cfg.validate()?;
    check_interval(t0, t1)?;
    check_state(state0)?;
    match cfg.method {
        Method::Rk4Fixed => {
            let mut x = state0.x.clone();
            let mut l = logp_column(state0);
            if t0 != t1 {
                let h = (t1 - t0) / cfg.steps as f64;
                for i in 0..cfg.steps {
                    let t = t0 + i as f64 * h;
                    let mut g = Graph::new();
                    let (xt, lt) = (g.constant(x), g.constant(l));
                    let (xn, ln) = rk4_step(&mut g, &mut f, t, h, xt, lt)?;
                    x = g.value(xn).clone();
                    l = g.value(ln).clone();
                }
            }
            AugmentedState::new(x, l.column(0).to_owned())
        }
        Method::Dopri5Adaptive => {
            let (b, d) = state0.x.dim();
            let mut y0 = Array1::zeros(b * d + b);
            y0.slice_mut(s![..b * d]).assign(&Array1::from_iter(state0.x.iter().copied()));
            y0.slice_mut(s![b * d..]).assign(&state0.logp);
            let mut rhs = |t: f64, y: &Array1<f64>| -> Result<Array1<f64>> {
                let mut g = Graph::new();
                let x = Array2::from_shape_vec((b, d), y.slice(s![..b * d]).to_vec()).expect("state shape");
                let l = y.slice(s![b * d..]).to_owned().insert_axis(ndarray::Axis(1));
                let (xt, lt) = (g.constant(x), g.constant(l));
                let out = f(&mut g, t, xt, lt)?;
                if g.shape(out.0) != (b, d) || g.shape(out.1) != (b, 1) {
                    return Err(Error::shape("dynamics output", format!("({b}, {d}) and ({b}, 1)"), format!("{:?} and {:?}", g.shape(out.0), g.shape(out.1))));
                }
                check_stage(&g, out, t)?;
                let mut dy = Array1::zeros(b * d + b);
                dy.slice_mut(s![..b * d]).assign(&Array1::from_iter(g.value(out.0).iter().copied()));
                dy.slice_mut(s![b * d..]).assign(&g.value(out.1).column(0));
                Ok(dy)
            };
            let y1 = dopri5(&mut rhs, y0, t0, t1, cfg)?;
            let x = Array2::from_shape_vec((b, d), y1.slice(s![..b * d]).to_vec()).expect("state shape");
            AugmentedState::new(x, y1.slice(s![b * d..]).to_owned())
        }
    }
}

/// A fixed-step solve kept on its tape for gradient queries.
pub struct TracedSolve {
    pub graph: Graph,
    pub bindings: Bindings,
    pub x: Tensor,
    /// B×1.
    pub logp: Tensor,
}

impl TracedSolve {
    pub fn state(&self) -> AugmentedState {
        AugmentedState {
            x: self.graph.value(self.x).clone(),
            logp: self.graph.value(self.logp).column(0).to_owned(),
        }
    }

    /// Gradient, with respect to the bound variables, of a scalar built from the final state.
    pub fn gradient<L>(&mut self, loss: L) -> Result<Gradients>
    where
        L: FnOnce(&mut Graph, Tensor, Tensor) -> Result<Tensor>,
    {
        let out = loss(&mut self.graph, self.x, self.logp)?;
        if self.graph.shape(out) != (1, 1) {
            return Err(Error::shape("solve loss", "1x1", format!("{:?}", self.graph.shape(out))));
        }
        crate::diffengine::ensure_finite(&self.graph)?;
        let grads = self.graph.backward(out, self.bindings.tensors());
        let names = self.bindings.names().to_vec();
        Ok(Gradients::new(self.graph.scalar(out), names, grads))
    }
}

/// Fixed-step solve whose dynamics may read the variables in `vars`;
/// answers gradient queries through every step.
pub fn ode_solve_with_grad<F>(
    mut f: F,
    state0: &AugmentedState,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    vars: &VariableSet,
) -> Result<TracedSolve>
where
    F: FnMut(&mut Graph, &Bindings, f64, Tensor, Tensor) -> Result<(Tensor, Tensor)>,
{
    cfg.validate()?;
    if cfg.method != Method::Rk4Fixed {
        return Err(Error::Config("differentiable solves need solver.method = rk4-fixed".into()));
    }
    check_state(state0)?;
    let mut g = Graph::new();
    let bindings = vars.bind(&mut g, true);
    let x0 = g.constant(state0.x.clone());
    let l0 = g.constant(logp_column(state0));
    let mut dyn_ = |g: &mut Graph, t: f64, x: Tensor, l: Tensor| f(g, &bindings, t, x, l);
    let (x, logp) = rk4_tape(&mut g, &mut dyn_, x0, l0, t0, t1, cfg.steps)?;
    Ok(TracedSolve {
        graph: g,
        bindings,
        x,
        logp,
    })
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn lin(y: &Array1<f64>, h: f64, terms: &[(f64, &Array1<f64>)]) -> Array1<f64> {
    let mut out = y.clone();
    for &(c, k) in terms {
        if c != 0.0 {
            out.scaled_add(h * c, k);
        }
    }
    out
}

fn scaled_max(v: &Array1<f64>, y0: &Array1<f64>, y1: &Array1<f64>, cfg: &SolverConfig) -> f64 {
    v.iter()
        .zip(y0.iter().zip(y1.iter()))
        .map(|(e, (a, b))| e.abs() / (cfg.atol + cfg.rtol * a.abs().max(b.abs())))
        .fold(0.0, f64::max)
}

fn dopri5<F>(f: &mut F, y0: Array1<f64>, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<Array1<f64>>
where
    F: FnMut(f64, &Array1<f64>) -> Result<Array1<f64>>,
{
    if t0 == t1 {
        return Ok(y0);
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y)?;

    // Starting step from the local scale of the solution and its derivative.
    let d0 = scaled_max(&y, &y, &y, cfg);
    let d1 = scaled_max(&k1, &y, &y, cfg);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y_probe = lin(&y, dir * h0, &[(1.0, &k1)]);
    let k_probe = f(t + dir * h0, &y_probe)?;
    let d2 = scaled_max(&(&k_probe - &k1), &y, &y, cfg) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    let mut h = (100.0 * h0).min(h1).min(span);

    let mut attempts = 0usize;
    let mut last_rejected = false;
    loop {
        if attempts >= cfg.max_steps {
            return Err(Error::Divergence {
                max_steps: cfg.max_steps,
                last_time: t,
            });
        }
        attempts += 1;
        let remaining = (t1 - t).abs();
        let last = h >= remaining;
        let hs = if last { remaining } else { h };
        if hs <= 1e-14 * t.abs().max(1.0) {
            return Err(Error::Divergence {
                max_steps: cfg.max_steps,
                last_time: t,
            });
        }
        let hd = dir * hs;
        let k2 = f(t + C2 * hd, &lin(&y, hd, &[(A21, &k1)]))?;
        let k3 = f(t + C3 * hd, &lin(&y, hd, &[(A31, &k1), (A32, &k2)]))?;
        let k4 = f(t + C4 * hd, &lin(&y, hd, &[(A41, &k1), (A42, &k2), (A43, &k3)]))?;
        let k5 = f(t + C5 * hd, &lin(&y, hd, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]))?;
        let k6 = f(
            t + hd,
            &lin(&y, hd, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
        )?;
        let y_new = lin(&y, hd, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        let t_new = if last { t1 } else { t + hd };
        let k7 = f(t_new, &y_new)?;
        let err_vec = lin(
            &Array1::zeros(y.len()),
            hd,
            &[(E1, &k1), (E3, &k3), (E4, &k4), (E5, &k5), (E6, &k6), (E7, &k7)],
        );
        let err = scaled_max(&err_vec, &y, &y_new, cfg);
        let fac = if err == 0.0 { 10.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 10.0) };
        if err <= 1.0 {
            t = t_new;
            y = y_new;
            k1 = k7;
            if last {
                return Ok(y);
            }
            h = hs * if last_rejected { fac.min(1.0) } else { fac };
            last_rejected = false;
        } else {
            h = hs * fac.min(1.0);
            last_rejected = true;
        }
    }
}
