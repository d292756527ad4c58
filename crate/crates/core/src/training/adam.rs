use ndarray::{Array2, Zip};

use crate::diffengine::VariableSet;
use crate::error::{Error, Result};

/// Adam with bias-corrected moments, one moment pair per variable.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(vars: &VariableSet, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
            return Err(Error::Config(format!("Adam betas must lie in [0, 1), got ({beta1}, {beta2})")));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("Adam epsilon must be positive, got {eps}")));
        }
        let zeros = || vars.iter().map(|v| Array2::zeros(v.value.dim())).collect();
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn timestep(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, vars: &mut VariableSet, grads: &[Array2<f64>]) -> Result<()> {
        if grads.len() != vars.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam gradients", self.m.len(), grads.len()));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.dim() != vars.value(i).dim() {
                return Err(Error::shape("adam gradient", format!("{:?}", vars.value(i).dim()), format!("{:?}", g.dim())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("gradient of `{}`", vars.name(i))));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, g) in grads.iter().enumerate() {
            Zip::from(vars.value_mut(i))
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
