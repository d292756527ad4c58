use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffengine::{jet, Graph, Jet, JetOrder};
use crate::error::{Error, Result};

/// Isotropic Gaussian `N(mean, var·I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDensity {
    pub mean: Vec<f64>,
    pub var: f64,
}

impl GaussianDensity {
    pub fn new(mean: Vec<f64>, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite()) || mean.iter().any(|m| !m.is_finite()) || mean.is_empty() {
            return Err(Error::Config(format!("invalid Gaussian: var = {var}, dim = {}", mean.len())));
        }
        Ok(Self { mean, var })
    }

    pub fn standard(d: usize) -> Self {
        Self { mean: vec![0.0; d], var: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_norm(&self) -> f64 {
        -0.5 * self.dim() as f64 * (2.0 * std::f64::consts::PI * self.var).ln()
    }

    pub fn log_density_point(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(&self.mean).map(|(a, m)| (a - m) * (a - m)).sum();
        self.log_norm() - r2 / (2.0 * self.var)
    }

    /// Batched evaluation, bit-identical to [`GaussianDensity::log_density_jet`].
    pub fn log_density(&self, x: &Array2<f64>) -> Array1<f64> {
        let mut g = Graph::new();
        let xt = g.constant(x.clone());
        let out = self.log_density_jet(&mut g, &Jet::constant(xt, 0, JetOrder::Value));
        g.value(out.val).column(0).to_owned()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let sd = self.var.sqrt();
        let d = self.dim();
        Array2::from_shape_fn((n, d), |(_, j)| {
            let z: f64 = rng.sample(StandardNormal);
            self.mean[j] + sd * z
        })
    }

    pub fn log_density_jet(&self, g: &mut Graph, x: &Jet) -> Jet {
        let neg_mean = Array2::from_shape_vec((1, self.dim()), self.mean.iter().map(|m| -m).collect())
            .expect("mean row");
        let shifted = if self.mean.iter().all(|&m| m == 0.0) {
            *x
        } else {
            let row = g.constant(neg_mean);
            jet::add_row(g, x, row)
        };
        let sq = jet::activation(g, &shifted, jet::Activation::Square);
        let s = jet::sum_cols(g, &sq);
        let s = jet::scale(g, &s, -0.5 / self.var);
        jet::offset(g, &s, self.log_norm())
    }
}
