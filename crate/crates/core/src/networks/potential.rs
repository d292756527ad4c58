use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Architecture, Checkpoint};
use super::{GaussianDensity, LogDensityModel};
use crate::diffengine::tape::smooth_abs;
use crate::diffengine::{jet, Activation, Bindings, Graph, Jet, JetOrder, Tensor, VariableSet};
use crate::error::{Error, Result};

/// Hyperparameters of [`PotentialNet`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    /// Residual layers `L` (the ResNet has `L + 1` layers).
    pub layers: usize,
    /// Hidden width `m`.
    pub width: usize,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        Self { layers: 4, width: 32 }
    }
}

/// `u(s) = wᵀN(s) + ½|As|² + bᵀs + c` on space-time points `s = (x, t)`,
/// where `N` is a residual network with smoothed-absolute-value activation
/// `σ(x) = log(eˣ + e⁻ˣ)`:
///
/// ```text
/// a₀ = σ(K₀ s + b₀),   a_k = a_{k−1} + h σ(K_k a_{k−1} + b_k),   h = 1/L
/// ```
///
/// `A` has `r = min(10, d + 1)` rows.
#[derive(Clone, Debug)]
pub struct PotentialNet {
    input: usize,
    config: PotentialConfig,
    params: VariableSet,
}

impl PotentialNet {
    /// Random initialization: weights `N(0, 0.01²)`, zero biases and offsets.
    pub fn new<R: Rng + ?Sized>(input: usize, config: PotentialConfig, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        Self::with_init(input, config, |r, c| Array2::from_shape_fn((r, c), |_| normal.sample(rng)))
    }

    /// A network with every parameter zero, so `u ≡ 0`.
    pub fn zeros(input: usize, config: PotentialConfig) -> Result<Self> {
        Self::with_init(input, config, |r, c| Array2::zeros((r, c)))
    }

    fn with_init(input: usize, config: PotentialConfig, mut rand: impl FnMut(usize, usize) -> Array2<f64>) -> Result<Self> {
        Self::validate(input, config)?;
        let (m, l) = (config.width, config.layers);
        let r = Self::rank_for(input);
        let mut p = VariableSet::new();
        p.insert("K0", rand(m, input))?;
        p.insert("b0", Array2::zeros((1, m)))?;
        for k in 1..=l {
            p.insert(format!("K{k}"), rand(m, m))?;
            p.insert(format!("b{k}"), Array2::zeros((1, m)))?;
        }
        p.insert("w", rand(1, m))?;
        p.insert("A", rand(r, input))?;
        p.insert("b", Array2::zeros((1, input)))?;
        p.insert("c", Array2::zeros((1, 1)))?;
        Ok(Self { input, config, params: p })
    }

    pub fn from_params(input: usize, config: PotentialConfig, params: VariableSet) -> Result<Self> {
        let reference = Self::zeros(input, config)?;
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (a, b) in reference.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.dim() != b.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    b.name,
                    b.value.dim(),
                    a.name,
                    a.value.dim()
                )));
            }
        }
        Ok(Self { input, config, params })
    }

    fn validate(input: usize, config: PotentialConfig) -> Result<()> {
        if input == 0 || config.layers == 0 || config.width == 0 {
            return Err(Error::Config(format!(
                "potential network needs positive input, layers and width (got {input}, {}, {})",
                config.layers, config.width
            )));
        }
        Ok(())
    }

    pub fn rank_for(input: usize) -> usize {
        input.min(10)
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn rank(&self) -> usize {
        Self::rank_for(self.input)
    }

    pub fn config(&self) -> PotentialConfig {
        self.config
    }

    pub fn step(&self) -> f64 {
        1.0 / self.config.layers as f64
    }

    pub fn params(&self) -> &VariableSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut VariableSet {
        &mut self.params
    }

    /// `u` on a B×(d+1) jet; returns a B×1 jet.
    pub fn jet(&self, g: &mut Graph, p: &Bindings, s: &Jet) -> Jet {
        let l = self.config.layers;
        let h = self.step();
        let z = jet::linear(g, s, p.get(0), Some(p.get(1)));
        let mut a = jet::activation(g, &z, Activation::SmoothAbs);
        for k in 1..=l {
            let z = jet::linear(g, &a, p.get(2 * k), Some(p.get(2 * k + 1)));
            let z = jet::activation(g, &z, Activation::SmoothAbs);
            let z = jet::scale(g, &z, h);
            a = jet::add(g, &a, &z);
        }
        let net = jet::linear(g, &a, p.get(2 * l + 2), None);
        let as_ = jet::linear(g, s, p.get(2 * l + 3), None);
        let quad = jet::activation(g, &as_, Activation::Square);
        let quad = jet::sum_cols(g, &quad);
        let quad = jet::scale(g, &quad, 0.5);
        let lin = jet::linear(g, s, p.get(2 * l + 4), None);
        let u = jet::add(g, &net, &quad);
        let u = jet::add(g, &u, &lin);
        jet::add_row(g, &u, p.get(2 * l + 5))
    }

    /// Plain evaluation of `u` at one space-time point.
    pub fn potential_u(&self, s: &[f64]) -> Result<f64> {
        if s.len() != self.input {
            return Err(Error::shape("potential_u", self.input, s.len()));
        }
        let l = self.config.layers;
        let h = self.step();
        let p = |i: usize| self.params.value(i);
        let affine = |w: &Array2<f64>, b: Option<&Array2<f64>>, x: &[f64]| -> Vec<f64> {
            (0..w.nrows())
                .map(|r| {
                    let dot: f64 = w.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
                    dot + b.map_or(0.0, |b| b[[0, r]])
                })
                .collect()
        };
        let mut a: Vec<f64> = affine(p(0), Some(p(1)), s).into_iter().map(smooth_abs).collect();
        for k in 1..=l {
            let z = affine(p(2 * k), Some(p(2 * k + 1)), &a);
            for (ai, zi) in a.iter_mut().zip(z) {
                *ai += h * smooth_abs(zi);
            }
        }
        let net = affine(p(2 * l + 2), None, &a)[0];
        let quad: f64 = affine(p(2 * l + 3), None, s).iter().map(|v| v * v).sum::<f64>() * 0.5;
        let lin = affine(p(2 * l + 4), None, s)[0];
        Ok(net + quad + lin + p(2 * l + 5)[[0, 0]])
    }
}

/// `φ(x, t) = log p₀(x) + t·u((x, t))`, so `φ(·, 0) = log p₀` for every `θ`.
#[derive(Clone, Debug)]
pub struct LogDensityTfp {
    pub initial: GaussianDensity,
    pub net: PotentialNet,
}

impl LogDensityTfp {
    pub fn new<R: Rng + ?Sized>(initial: GaussianDensity, config: PotentialConfig, rng: &mut R) -> Result<Self> {
        let net = PotentialNet::new(initial.dim() + 1, config, rng)?;
        Ok(Self { initial, net })
    }

    /// Plain evaluation at one point.
    pub fn log_density_point(&self, x: &[f64], t: f64) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape("log_density_tfp", self.dim(), x.len()));
        }
        let mut s = x.to_vec();
        s.push(t);
        Ok(self.initial.log_density_point(x) + t * self.net.potential_u(&s)?)
    }
}

impl LogDensityModel for LogDensityTfp {
    fn dim(&self) -> usize {
        self.initial.dim()
    }

    fn params(&self) -> &VariableSet {
        &self.net.params
    }

    fn params_mut(&mut self) -> &mut VariableSet {
        &mut self.net.params
    }

    fn log_density_jet(&self, g: &mut Graph, p: &Bindings, x: &Jet, t: Tensor) -> Jet {
        let tj = Jet::constant(t, x.dirs, JetOrder::Value);
        let s = jet::concat(g, &[*x, tj]);
        let s = Jet { order: x.order, ..s };
        let u = self.net.jet(g, p, &s);
        let tu = jet::mul_col(g, &u, t);
        let lp0 = self.initial.log_density_jet(g, x);
        jet::add(g, &lp0, &tu)
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            Architecture::Potential {
                dim: self.dim(),
                layers: self.net.config.layers,
                width: self.net.config.width,
                rank: self.net.rank(),
                initial: self.initial.clone(),
            },
            &self.net.params,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::log_density;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_is_zero() {
        let net = PotentialNet::zeros(5, PotentialConfig::default()).unwrap();
        assert_eq!(net.potential_u(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_term_alone() {
        let mut net = PotentialNet::zeros(4, PotentialConfig::default()).unwrap();
        let a = net.params.position("A").unwrap();
        net.params.value_mut(a)[[0, 0]] = 1.0;
        assert_eq!(net.potential_u(&[2.0, 0.0, 0.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn rank_rule() {
        assert_eq!(PotentialNet::rank_for(3), 3);
        assert_eq!(PotentialNet::rank_for(11), 10);
        assert_eq!(PotentialNet::rank_for(31), 10);
    }

    #[test]
    fn wrong_length_is_shape_error() {
        let net = PotentialNet::zeros(3, PotentialConfig::default()).unwrap();
        assert!(matches!(net.potential_u(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn standard_gaussian_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = LogDensityTfp::new(GaussianDensity::standard(10), PotentialConfig::default(), &mut rng).unwrap();
        let x = Array2::zeros((1, 10));
        let v0 = log_density(&model, &x, 0.0).unwrap()[0];
        assert!((v0 - (-5.0 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((v0 + 9.18939).abs() < 1e-5);
        let zero = LogDensityTfp {
            initial: GaussianDensity::standard(10),
            net: PotentialNet::zeros(11, PotentialConfig::default()).unwrap(),
        };
        assert_eq!(log_density(&zero, &x, 1.0).unwrap()[0], v0);
    }
}
