//! Fokker–Planck problems and their characteristic dynamics.
//!
//! For `∂p/∂t = −∇·(μp) + Σᵢⱼ ∂ᵢ∂ⱼ(Dᵢⱼ p)` with symmetric PSD `D`, the density
//! is transported by the effective drift
//!
//! ```text
//! μ* = μ − D∇log p − ∇·D,       (∇·D)ⱼ = Σᵢ ∂ᵢDᵢⱼ
//! ```
//!
//! and along `dx/dt = μ*` the log-density obeys `d log p/dt = −∇·μ*`.

mod drift;
mod dynamics;

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2};

pub use drift::{LinearRestoringDrift, UniformDrift};
pub use dynamics::{
    augmented_dynamics, augmented_dynamics_tape, effective_drift, effective_drift_tape, predict_log_density,
    scale_invariance_check, ModelRef,
};

use crate::diffengine::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::networks::GaussianDensity;

/// A drift field `μ(x, t)` evaluated on the tape.
///
/// `x` is B×d and `t` is a B×1 column. Both methods act row-wise.
pub trait DriftField: Send + Sync {
    fn drift(&self, g: &mut Graph, x: Tensor, t: Tensor) -> Tensor;

    /// `∇·μ` as a B×1 column.
    fn divergence(&self, g: &mut Graph, x: Tensor, t: Tensor) -> Tensor;
}

/// A state-dependent diffusion `D(x, t) = Σⱼ cⱼ cⱼᵀ` given by its factor.
pub trait DiffusionField: Send + Sync {
    /// Number of factor columns `k`.
    fn rank(&self) -> usize;

    /// (B·k)×d node whose row `b·k + j` is `cⱼ(x_b)ᵀ`.
    fn factor(&self, g: &mut Graph, x: Tensor, t: Tensor) -> Tensor;

    /// B×d node of `(∇·D)ⱼ = Σᵢ ∂ᵢDᵢⱼ`.
    fn row_divergence(&self, g: &mut Graph, x: Tensor, t: Tensor) -> Tensor;

    /// B×1 node of `Σⱼ ∂ⱼ(∇·D)ⱼ`.
    fn row_divergence_divergence(&self, g: &mut Graph, x: Tensor, t: Tensor) -> Tensor;
}

#[derive(Clone)]
pub enum Diffusion {
    Zero,
    /// Constant symmetric PSD matrix with a factor `C` (d×k), `D = C Cᵀ`.
    Constant { matrix: Array2<f64>, factor: Array2<f64> },
    Field(Arc<dyn DiffusionField>),
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Zero => write!(f, "Zero"),
            Diffusion::Constant { matrix, .. } => write!(f, "Constant({matrix:?})"),
            Diffusion::Field(field) => write!(f, "Field(rank {})", field.rank()),
        }
    }
}

impl Diffusion {
    /// Validates symmetry and positive semidefiniteness and factors the matrix.
    pub fn constant(matrix: Array2<f64>) -> Result<Self> {
        let factor = psd_factor(&matrix)?;
        if factor.ncols() == 0 {
            return Ok(Diffusion::Zero);
        }
        Ok(Diffusion::Constant { matrix, factor })
    }

    /// `D = c·I`.
    pub fn isotropic(d: usize, c: f64) -> Result<Self> {
        if c == 0.0 {
            return Ok(Diffusion::Zero);
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Config(format!("diffusion coefficient must be non-negative, got {c}")));
        }
        Ok(Diffusion::Constant {
            matrix: Array2::eye(d) * c,
            factor: Array2::eye(d) * c.sqrt(),
        })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Diffusion::Zero)
    }
}

/// Cholesky-type factor `C` (d×k) of a symmetric PSD matrix, `A = C Cᵀ`,
/// with numerically zero pivots dropped.
pub fn psd_factor(a: &Array2<f64>) -> Result<Array2<f64>> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::shape("diffusion matrix", "square", format!("{:?}", a.dim())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("diffusion matrix has non-finite entries".into()));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale * d as f64;
    for i in 0..d {
        for j in 0..i {
            if (a[[i, j]] - a[[j, i]]).abs() > tol {
                return Err(Error::Config(format!("diffusion matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut l = Array2::<f64>::zeros((d, d));
    let mut keep = Vec::new();
    for j in 0..d {
        let pivot = a[[j, j]] - (0..j).map(|k| l[[j, k]] * l[[j, k]]).sum::<f64>();
        if pivot < -tol {
            return Err(Error::Config("diffusion matrix is not positive semidefinite".into()));
        }
        if pivot <= tol {
            for i in j + 1..d {
                let off = a[[i, j]] - (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum::<f64>();
                if off.abs() > tol.sqrt() * scale.sqrt() {
                    return Err(Error::Config("diffusion matrix is not positive semidefinite".into()));
                }
            }
            continue;
        }
        let r = pivot.sqrt();
        l[[j, j]] = r;
        for i in j + 1..d {
            l[[i, j]] = (a[[i, j]] - (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum::<f64>()) / r;
        }
        keep.push(j);
    }
    Ok(l.select(ndarray::Axis(1), &keep))
}

/// One Fokker–Planck equation instance.
#[derive(Clone)]
pub struct FpProblem {
    pub name: String,
    pub dim: usize,
    pub drift: Arc<dyn DriftField>,
    pub diffusion: Diffusion,
    /// `p₀` for time-dependent problems; `None` for stationary ones.
    pub initial: Option<GaussianDensity>,
    pub horizon: Option<f64>,
}

impl fmt::Debug for FpProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FpProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("diffusion", &self.diffusion)
            .field("initial", &self.initial)
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl FpProblem {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("problem dimension must be positive".into()));
        }
        if let Some(p0) = &self.initial {
            if p0.dim() != self.dim {
                return Err(Error::shape("initial density", self.dim, p0.dim()));
            }
        }
        if let Diffusion::Constant { matrix, factor } = &self.diffusion {
            if matrix.dim() != (self.dim, self.dim) || factor.nrows() != self.dim {
                return Err(Error::shape("diffusion matrix", self.dim, matrix.nrows()));
            }
        }
        if let Some(t) = self.horizon {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("horizon must be positive, got {t}")));
            }
        }
        Ok(())
    }

    pub fn is_zero_diffusion(&self) -> bool {
        self.diffusion.is_zero()
    }

    pub fn is_stationary(&self) -> bool {
        self.initial.is_none()
    }

    pub(crate) fn check_batch(&self, context: &'static str, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::shape(context, format!("{} columns", self.dim), format!("{} columns", x.ncols())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("{context}: non-finite state")));
        }
        Ok(())
    }

    pub fn drift_values(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        self.check_batch("drift", x)?;
        let mut g = Graph::new();
        let xt = g.constant(x.clone());
        let tt = g.filled(x.nrows(), 1, t);
        let mu = self.drift.drift(&mut g, xt, tt);
        Ok(g.value(mu).clone())
    }

    /// Diffusion factors at the rows of `x`: row `b·k + j` is `cⱼ(x_b)ᵀ`.
    pub fn factor_values(&self, x: &Array2<f64>, t: f64) -> Result<Option<(usize, Array2<f64>)>> {
        self.check_batch("diffusion", x)?;
        match &self.diffusion {
            Diffusion::Zero => Ok(None),
            Diffusion::Constant { factor, .. } => {
                let k = factor.ncols();
                let ct = factor.t();
                let mut out = Array2::zeros((x.nrows() * k, self.dim));
                for b in 0..x.nrows() {
                    for j in 0..k {
                        out.row_mut(b * k + j).assign(&ct.row(j));
                    }
                }
                Ok(Some((k, out)))
            }
            Diffusion::Field(f) => {
                let mut g = Graph::new();
                let xt = g.constant(x.clone());
                let tt = g.filled(x.nrows(), 1, t);
                let c = f.factor(&mut g, xt, tt);
                Ok(Some((f.rank(), g.value(c).clone())))
            }
        }
    }

    /// `D(x, t)` at a single point.
    pub fn diffusion_matrix(&self, x: &[f64], t: f64) -> Result<Array2<f64>> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| Error::Config(e.to_string()))?;
        match self.factor_values(&row, t)? {
            None => Ok(Array2::zeros((self.dim, self.dim))),
            Some((_, c)) => Ok(c.t().dot(&c)),
        }
    }
}

/// Batched state of the characteristic ODE: positions and log-densities.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub x: Array2<f64>,
    pub logp: Array1<f64>,
}

impl AugmentedState {
    pub fn new(x: Array2<f64>, logp: Array1<f64>) -> Result<Self> {
        if logp.len() != x.nrows() {
            return Err(Error::shape("augmented state", x.nrows(), logp.len()));
        }
        Ok(Self { x, logp })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.logp.iter()).all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn factor_reproduces_matrix() {
        let a = array![[2.0, 0.5, 0.0], [0.5, 1.0, 0.3], [0.0, 0.3, 0.8]];
        let c = psd_factor(&a).unwrap();
        let back = c.dot(&c.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_deficient_factor_drops_columns() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        let c = psd_factor(&a).unwrap();
        assert_eq!(c.ncols(), 1);
        let back = c.dot(&c.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn indefinite_and_asymmetric_rejected() {
        assert!(psd_factor(&array![[1.0, 2.0], [2.0, 1.0]]).is_err());
        assert!(psd_factor(&array![[1.0, 0.1], [0.0, 1.0]]).is_err());
        assert!(psd_factor(&array![[-1.0]]).is_err());
    }

    #[test]
    fn zero_matrix_is_zero_diffusion() {
        assert!(Diffusion::constant(Array2::zeros((3, 3))).unwrap().is_zero());
    }
}
