use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Architecture, Checkpoint};
use super::{check_points, standard_normal_jet, LogDensityModel};
use crate::diffengine::{ensure_finite, jet, Activation, Bindings, Graph, Jet, JetOrder, Tensor, VariableSet};
use crate::error::{Error, Result};

const PARAMS_PER_NET: usize = 6;
const PARAMS_PER_LAYER: usize = 2 * PARAMS_PER_NET;

/// Hyperparameters of [`CouplingFlow`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of coupling layers.
    pub layers: usize,
    /// Hidden width of the `s` and `t` perceptrons.
    pub hidden: usize,
    /// Optional soft clamp `s ↦ s_max·tanh(s/s_max)` on the log-scale.
    #[serde(default)]
    pub s_max: Option<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { layers: 4, hidden: 32, s_max: None }
    }
}

/// Stack of affine coupling layers over a standard normal base.
///
/// Layer `l` with binary mask `b` maps
///
/// ```text
/// y = b⊙x + (1−b)⊙(x⊙exp(s(b⊙x)) + t(b⊙x))
/// ```
///
/// where `s` and `t` are perceptrons `d → h → h → d` with `tanh` hidden
/// activations. Masks alternate between the first and second half of the
/// coordinates. `forward` maps latent to data, `backward` inverts it.
#[derive(Clone, Debug)]
pub struct CouplingFlow {
    dim: usize,
    config: FlowConfig,
    masks: Vec<Vec<u8>>,
    params: VariableSet,
}

/// Mask of layer `l`: even layers keep the first `⌊d/2⌋` coordinates.
pub fn alternating_mask(d: usize, l: usize) -> Vec<u8> {
    (0..d).map(|i| u8::from((i < d / 2) == (l % 2 == 0))).collect()
}

impl CouplingFlow {
    /// Hidden weights `N(0, 0.01²)`, zero biases, zero output layers: the identity map.
    pub fn new<R: Rng + ?Sized>(dim: usize, config: FlowConfig, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        Self::with_init(dim, config, |r, c| Array2::from_shape_fn((r, c), |_| normal.sample(rng)))
    }

    /// Every parameter zero: the identity map.
    pub fn zeros(dim: usize, config: FlowConfig) -> Result<Self> {
        Self::with_init(dim, config, |r, c| Array2::zeros((r, c)))
    }

    fn with_init(dim: usize, config: FlowConfig, mut rand: impl FnMut(usize, usize) -> Array2<f64>) -> Result<Self> {
        if dim == 0 || config.layers == 0 || config.hidden == 0 {
            return Err(Error::Config(format!(
                "coupling flow needs positive dim, layers and hidden width (got {dim}, {}, {})",
                config.layers, config.hidden
            )));
        }
        if let Some(m) = config.s_max {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::Config(format!("s_max must be positive, got {m}")));
            }
        }
        let h = config.hidden;
        let mut params = VariableSet::new();
        for l in 0..config.layers {
            for net in ["s", "t"] {
                params.insert(format!("l{l}.{net}.K1"), rand(h, dim))?;
                params.insert(format!("l{l}.{net}.b1"), Array2::zeros((1, h)))?;
                params.insert(format!("l{l}.{net}.K2"), rand(h, h))?;
                params.insert(format!("l{l}.{net}.b2"), Array2::zeros((1, h)))?;
                params.insert(format!("l{l}.{net}.K3"), Array2::zeros((dim, h)))?;
                params.insert(format!("l{l}.{net}.b3"), Array2::zeros((1, dim)))?;
            }
        }
        let masks = (0..config.layers).map(|l| alternating_mask(dim, l)).collect();
        Ok(Self { dim, config, masks, params })
    }

    /// Rebuilds a flow from stored masks and parameters.
    pub fn from_parts(dim: usize, config: FlowConfig, masks: Vec<Vec<u8>>, params: VariableSet) -> Result<Self> {
        let reference = Self::zeros(dim, config)?;
        if masks.len() != config.layers || masks.iter().any(|m| m.len() != dim || m.iter().any(|&v| v > 1)) {
            return Err(Error::Checkpoint("masks must be one binary vector of length d per layer".into()));
        }
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
        Ok(Self { dim, config, masks, params })
    }

    /// The linear map `x = std·z` realized by constant log-scales, so that
    /// the flow density is exactly `N(0, std²·I)`.
    pub fn isotropic_scaling(dim: usize, config: FlowConfig, std: f64) -> Result<Self> {
        if config.s_max.is_some() {
            return Err(Error::Config("isotropic scaling is defined without an s clamp".into()));
        }
        let mut flow = Self::zeros(dim, config)?;
        let counts: Vec<usize> = (0..dim)
            .map(|i| flow.masks.iter().filter(|m| m[i] == 0).count())
            .collect();
        if counts.contains(&0) {
            return Err(Error::Config("some coordinate is never transformed".into()));
        }
        for l in 0..config.layers {
            let idx = l * PARAMS_PER_LAYER + 5;
            for i in 0..dim {
                if flow.masks[l][i] == 0 {
                    flow.params.value_mut(idx)[[0, i]] = std.ln() / counts[i] as f64;
                }
            }
        }
        Ok(flow)
    }

    pub fn config(&self) -> FlowConfig {
        self.config
    }

    pub fn masks(&self) -> &[Vec<u8>] {
        &self.masks
    }

    fn mask_rows(&self, g: &mut Graph, l: usize) -> (Tensor, Tensor) {
        let b: Vec<f64> = self.masks[l].iter().map(|&v| f64::from(v)).collect();
        let nb: Vec<f64> = b.iter().map(|v| 1.0 - v).collect();
        (
            g.constant(Array2::from_shape_vec((1, self.dim), b).expect("mask")),
            g.constant(Array2::from_shape_vec((1, self.dim), nb).expect("mask")),
        )
    }

    fn perceptron(&self, g: &mut Graph, p: &Bindings, base: usize, x: &Jet) -> Jet {
        let z = jet::linear(g, x, p.get(base), Some(p.get(base + 1)));
        let z = jet::activation(g, &z, Activation::Tanh);
        let z = jet::linear(g, &z, p.get(base + 2), Some(p.get(base + 3)));
        let z = jet::activation(g, &z, Activation::Tanh);
        jet::linear(g, &z, p.get(base + 4), Some(p.get(base + 5)))
    }

    /// Masked log-scale `(1−b)⊙s` and shift `t` of layer `l` at the kept input.
    fn scale_shift(&self, g: &mut Graph, p: &Bindings, l: usize, kept: &Jet, nb: Tensor) -> (Jet, Jet) {
        let base = l * PARAMS_PER_LAYER;
        let mut s = self.perceptron(g, p, base, kept);
        if let Some(m) = self.config.s_max {
            let u = jet::scale(g, &s, 1.0 / m);
            let u = jet::activation(g, &u, Activation::Tanh);
            s = jet::scale(g, &u, m);
        }
        let t = self.perceptron(g, p, base + PARAMS_PER_NET, kept);
        (jet::mul_row(g, &s, nb), t)
    }

    /// Latent to data. Returns the mapped jet and `log|det ∂x/∂z|` (B×1).
    pub fn forward_jet(&self, g: &mut Graph, p: &Bindings, z: &Jet) -> (Jet, Jet) {
        let mut x = *z;
        let mut logdet: Option<Jet> = None;
        for l in 0..self.config.layers {
            let (b, nb) = self.mask_rows(g, l);
            let kept = jet::mul_row(g, &x, b);
            let (s, t) = self.scale_shift(g, p, l, &kept, nb);
            let e = jet::activation(g, &s, Activation::Exp);
            let moved = jet::mul(g, &x, &e);
            let moved = jet::add(g, &moved, &t);
            let moved = jet::mul_row(g, &moved, nb);
            x = jet::add(g, &kept, &moved);
            let ld = jet::sum_cols(g, &s);
            logdet = Some(match logdet {
                Some(acc) => jet::add(g, &acc, &ld),
                None => ld,
            });
        }
        (x, logdet.expect("at least one layer"))
    }

    /// Data to latent. Returns the latent jet and `log|det ∂z/∂x|` (B×1).
    pub fn backward_jet(&self, g: &mut Graph, p: &Bindings, x: &Jet) -> (Jet, Jet) {
        let mut y = *x;
        let mut logdet: Option<Jet> = None;
        for l in (0..self.config.layers).rev() {
            let (b, nb) = self.mask_rows(g, l);
            let kept = jet::mul_row(g, &y, b);
            let (s, t) = self.scale_shift(g, p, l, &kept, nb);
            let neg = jet::scale(g, &s, -1.0);
            let e = jet::activation(g, &neg, Activation::Exp);
            let moved = jet::sub(g, &y, &t);
            let moved = jet::mul(g, &moved, &e);
            let moved = jet::mul_row(g, &moved, nb);
            y = jet::add(g, &kept, &moved);
            let ld = jet::sum_cols(g, &neg);
            logdet = Some(match logdet {
                Some(acc) => jet::add(g, &acc, &ld),
                None => ld,
            });
        }
        (y, logdet.expect("at least one layer"))
    }

    /// Pushes latent points and their log-densities forward on the tape.
    pub fn forward_tape(&self, g: &mut Graph, p: &Bindings, z: Tensor, logp_z: Tensor) -> (Tensor, Tensor) {
        let zj = Jet::constant(z, 0, JetOrder::Value);
        let (x, ld) = self.forward_jet(g, p, &zj);
        (x.val, g.sub(logp_z, ld.val))
    }

    /// `(x, log p_X(x))` from latent points `z` with log-densities `logp_z`.
    pub fn flow_forward(&self, z: &Array2<f64>, logp_z: &Array1<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        check_points("flow_forward", self.dim, z)?;
        if logp_z.len() != z.nrows() {
            return Err(Error::shape("flow_forward", z.nrows(), logp_z.len()));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zt = g.constant(z.clone());
        let lz = g.constant(logp_z.clone().insert_axis(ndarray::Axis(1)));
        let (x, lx) = self.forward_tape(&mut g, &p, zt, lz);
        ensure_finite(&g)?;
        Ok((g.value(x).clone(), g.value(lx).column(0).to_owned()))
    }

    /// `(z, log p_X(x))`, where `z` is the latent preimage of `x`.
    pub fn flow_backward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        check_points("flow_backward", self.dim, x)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xt = g.constant(x.clone());
        let (z, ld) = self.backward_jet(&mut g, &p, &Jet::constant(xt, 0, JetOrder::Value));
        let base = standard_normal_jet(&mut g, &z);
        let lp = g.add(base.val, ld.val);
        ensure_finite(&g)?;
        Ok((g.value(z.val).clone(), g.value(lp).column(0).to_owned()))
    }
}

impl LogDensityModel for CouplingFlow {
    fn dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &VariableSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut VariableSet {
        &mut self.params
    }

    /// Stationary: `t` is ignored.
    fn log_density_jet(&self, g: &mut Graph, p: &Bindings, x: &Jet, _t: Tensor) -> Jet {
        let (z, ld) = self.backward_jet(g, p, x);
        let base = standard_normal_jet(g, &z);
        jet::add(g, &base, &ld)
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            Architecture::Coupling {
                dim: self.dim,
                layers: self.config.layers,
                hidden: self.config.hidden,
                s_max: self.config.s_max,
                masks: self.masks.clone(),
            },
            &self.params,
        )
    }
}
