//! Log-density models.
//!
//! [`LogDensityTfp`] is a time-dependent model built on a quadratic-potential
//! ResNet with the initial condition enforced by construction.
//! [`CouplingFlow`] is an affine-coupling normalizing flow used for
//! stationary densities.

mod checkpoint;
mod coupling;
mod gaussian;
mod potential;

use ndarray::{Array1, Array2};

pub use checkpoint::{AnyModel, Architecture, Checkpoint, ParamRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use coupling::{CouplingFlow, FlowConfig};
pub use gaussian::GaussianDensity;
pub use potential::{LogDensityTfp, PotentialConfig, PotentialNet};

use crate::diffengine::{ensure_finite, jet, Bindings, Graph, Jet, JetOrder, Tensor, VariableSet};
use crate::error::{Error, Result};

/// A parameterized log-density `log p(x, t; θ)`.
///
/// Implementations propagate a [`Jet`] so that spatial derivatives of the
/// log-density are available to the dynamics without nested tapes.
pub trait LogDensityModel: Send + Sync {
    fn dim(&self) -> usize;

    fn params(&self) -> &VariableSet;

    fn params_mut(&mut self) -> &mut VariableSet;

    /// Log-density of the B×d input jet at the times in the B×1 column `t`.
    /// `p` must come from binding [`LogDensityModel::params`].
    fn log_density_jet(&self, g: &mut Graph, p: &Bindings, x: &Jet, t: Tensor) -> Jet;

    fn checkpoint(&self) -> Checkpoint;
}

pub(crate) fn check_points(context: &'static str, d: usize, x: &Array2<f64>) -> Result<()> {
    if x.ncols() != d {
        return Err(Error::shape(context, format!("{d} columns"), format!("{} columns", x.ncols())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{context}: non-finite input point")));
    }
    Ok(())
}

/// Log-density at the rows of `x`, all at time `t`.
pub fn log_density(model: &dyn LogDensityModel, x: &Array2<f64>, t: f64) -> Result<Array1<f64>> {
    check_points("log_density", model.dim(), x)?;
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let xt = g.constant(x.clone());
    let tt = g.filled(x.nrows(), 1, t);
    let out = model.log_density_jet(&mut g, &p, &Jet::constant(xt, 0, JetOrder::Value), tt);
    ensure_finite(&g)?;
    Ok(g.value(out.val).column(0).to_owned())
}

/// Exact spatial gradient of the log-density (the score) at the rows of `x`.
pub fn spatial_grad_logp(model: &dyn LogDensityModel, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
    check_points("spatial_grad_logp", model.dim(), x)?;
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let xt = g.constant(x.clone());
    let tt = g.filled(x.nrows(), 1, t);
    let seed = Jet::seed_identity(&mut g, xt, JetOrder::Gradient);
    let out = model.log_density_jet(&mut g, &p, &seed, tt);
    let grad = out.directional(&mut g);
    ensure_finite(&g)?;
    Ok(g.value(grad).clone())
}

/// Exact Laplacian of the log-density at the rows of `x`.
pub fn laplacian_logp(model: &dyn LogDensityModel, x: &Array2<f64>, t: f64) -> Result<Array1<f64>> {
    check_points("laplacian_logp", model.dim(), x)?;
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let xt = g.constant(x.clone());
    let tt = g.filled(x.nrows(), 1, t);
    let seed = Jet::seed_identity(&mut g, xt, JetOrder::Laplacian);
    let out = model.log_density_jet(&mut g, &p, &seed, tt);
    let lap = out.laplacian(&mut g);
    ensure_finite(&g)?;
    Ok(g.value(lap).column(0).to_owned())
}

/// Standard normal log-density jet, `−d/2·log 2π − ½|z|²`.
pub(crate) fn standard_normal_jet(g: &mut Graph, z: &Jet) -> Jet {
    let d = z.width(g) as f64;
    let sq = jet::activation(g, z, jet::Activation::Square);
    let s = jet::sum_cols(g, &sq);
    let s = jet::scale(g, &s, -0.5);
    jet::offset(g, &s, -0.5 * d * (2.0 * std::f64::consts::PI).ln())
}
