use super::DriftField;
use crate::diffengine::{Graph, Tensor};

/// `μ(x, t) = (base + rate·t)·1`, the same velocity in every coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformDrift {
    pub base: f64,
    pub rate: f64,
}

impl DriftField for UniformDrift {
    fn drift(&self, g: &mut Graph, x: Tensor, t: Tensor) -> Tensor {
        let d = g.shape(x).1;
        let v = g.scale(t, self.rate);
        let v = g.offset(v, self.base);
        g.broadcast_cols(v, d)
    }

    fn divergence(&self, g: &mut Graph, x: Tensor, _t: Tensor) -> Tensor {
        g.filled(g.shape(x).0, 1, 0.0)
    }
}

/// `μ(x) = −a·x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearRestoringDrift {
    pub a: f64,
}

impl DriftField for LinearRestoringDrift {
    fn drift(&self, g: &mut Graph, x: Tensor, _t: Tensor) -> Tensor {
        g.scale(x, -self.a)
    }

    fn divergence(&self, g: &mut Graph, x: Tensor, _t: Tensor) -> Tensor {
        let (b, d) = g.shape(x);
        g.filled(b, 1, -self.a * d as f64)
    }
}
