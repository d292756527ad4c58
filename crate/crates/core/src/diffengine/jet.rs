//! Second-order forward (Taylor-mode) propagation on top of the tape.
//!
//! A [`Jet`] carries, for a batch of `B` points and `k` seed directions
//! `v₁..v_k` in input space:
//!
//! * `val`: B×n values,
//! * `jac`: (B·k)×n directional derivatives, row `b·k + j` is `∂_{v_j} f(x_b)`,
//! * `lap`: B×n, the sum over seeds of second directional derivatives
//!   `Σ_j v_jᵀ ∇²f v_j`. With identity seeds this is the Laplacian; with the
//!   columns of a factor `C` of `D = C Cᵀ` it is `tr(D ∇²f)`.
//!
//! Every jet component is an ordinary tape node, so parameter gradients of
//! spatial derivatives come out of a single reverse sweep.

use ndarray::Array2;

use super::tape::{Graph, Tensor};

/// How many orders of spatial derivatives to carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum JetOrder {
    Value,
    Gradient,
    Laplacian,
}

#[derive(Clone, Copy, Debug)]
pub struct Jet {
    pub val: Tensor,
    /// `None` means identically zero.
    pub jac: Option<Tensor>,
    /// `None` means identically zero.
    pub lap: Option<Tensor>,
    pub dirs: usize,
    pub order: JetOrder,
}

/// Elementwise activations with known first and second derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// `log(eˣ + e⁻ˣ)`
    SmoothAbs,
    Exp,
    Square,
}

impl Jet {
    /// A function of `x` only through `val`; derivatives are zero.
    pub fn constant(val: Tensor, dirs: usize, order: JetOrder) -> Self {
        Jet {
            val,
            jac: None,
            lap: None,
            dirs,
            order,
        }
    }

    /// Seeds the identity map `x ↦ x` with directions given as a (B·k)×d node.
    pub fn seed(g: &mut Graph, x: Tensor, directions: Tensor, k: usize, order: JetOrder) -> Self {
        let (b, d) = g.shape(x);
        assert_eq!(g.shape(directions), (b * k, d), "seed directions shape");
        Jet {
            val: x,
            jac: (order >= JetOrder::Gradient).then_some(directions),
            lap: None,
            dirs: k,
            order,
        }
    }

    /// Seeds with the same k×d direction matrix (one direction per row) for every point.
    pub fn seed_shared(
        g: &mut Graph,
        x: Tensor,
        directions: &Array2<f64>,
        order: JetOrder,
    ) -> Self {
        let (b, d) = g.shape(x);
        let k = directions.nrows();
        assert_eq!(directions.ncols(), d, "direction width");
        if order == JetOrder::Value {
            return Jet::constant(x, k, order);
        }
        let mut seeds = Array2::zeros((b * k, d));
        for i in 0..b {
            for j in 0..k {
                seeds.row_mut(i * k + j).assign(&directions.row(j));
            }
        }
        let seeds = g.constant(seeds);
        Jet::seed(g, x, seeds, k, order)
    }

    /// Identity seeds: `jac` holds gradients, `lap` the Laplacian.
    pub fn seed_identity(g: &mut Graph, x: Tensor, order: JetOrder) -> Self {
        let d = g.shape(x).1;
        Jet::seed_shared(g, x, &Array2::eye(d), order)
    }

    pub fn batch(&self, g: &Graph) -> usize {
        g.shape(self.val).0
    }

    pub fn width(&self, g: &Graph) -> usize {
        g.shape(self.val).1
    }

    /// For a B×1 jet, the B×k matrix of directional derivatives.
    pub fn directional(&self, g: &mut Graph) -> Tensor {
        let b = self.batch(g);
        assert_eq!(self.width(g), 1, "directional() needs a scalar field");
        match self.jac {
            Some(j) => g.reshape(j, b, self.dirs),
            None => g.filled(b, self.dirs, 0.0),
        }
    }

    /// The second-order part, materialized as zeros if absent.
    pub fn laplacian(&self, g: &mut Graph) -> Tensor {
        match self.lap {
            Some(l) => l,
            None => {
                let (b, n) = g.shape(self.val);
                g.filled(b, n, 0.0)
            }
        }
    }

    fn merge(&self, other: &Jet) -> (usize, JetOrder) {
        assert!(
            self.dirs == other.dirs || self.jac.is_none() || other.jac.is_none(),
            "jets with different seeds"
        );
        (self.dirs.max(other.dirs), self.order.max(other.order))
    }
}

fn opt_add(g: &mut Graph, a: Option<Tensor>, b: Option<Tensor>) -> Option<Tensor> {
    match (a, b) {
        (Some(a), Some(b)) => Some(g.add(a, b)),
        (a, None) => a,
        (None, b) => b,
    }
}

fn opt_sub(g: &mut Graph, a: Option<Tensor>, b: Option<Tensor>) -> Option<Tensor> {
    match (a, b) {
        (Some(a), Some(b)) => Some(g.sub(a, b)),
        (a, None) => a,
        (None, Some(b)) => Some(g.neg(b)),
    }
}

pub fn add(g: &mut Graph, a: &Jet, b: &Jet) -> Jet {
    let (dirs, order) = a.merge(b);
    Jet {
        val: g.add(a.val, b.val),
        jac: opt_add(g, a.jac, b.jac),
        lap: opt_add(g, a.lap, b.lap),
        dirs,
        order,
    }
}

pub fn sub(g: &mut Graph, a: &Jet, b: &Jet) -> Jet {
    let (dirs, order) = a.merge(b);
    Jet {
        val: g.sub(a.val, b.val),
        jac: opt_sub(g, a.jac, b.jac),
        lap: opt_sub(g, a.lap, b.lap),
        dirs,
        order,
    }
}

pub fn scale(g: &mut Graph, a: &Jet, c: f64) -> Jet {
    Jet {
        val: g.scale(a.val, c),
        jac: a.jac.map(|j| g.scale(j, c)),
        lap: a.lap.map(|l| g.scale(l, c)),
        ..*a
    }
}

/// Adds a constant (in x) to the value only.
pub fn offset(g: &mut Graph, a: &Jet, c: f64) -> Jet {
    Jet {
        val: g.offset(a.val, c),
        ..*a
    }
}

/// Adds a node that does not depend on x (e.g. a bias broadcast) to the value.
pub fn add_row(g: &mut Graph, a: &Jet, row: Tensor) -> Jet {
    Jet {
        val: g.add_row(a.val, row),
        ..*a
    }
}

/// Multiplies by a 1×n row that does not depend on x.
pub fn mul_row(g: &mut Graph, a: &Jet, row: Tensor) -> Jet {
    Jet {
        val: g.mul_row(a.val, row),
        jac: a.jac.map(|j| g.mul_row(j, row)),
        lap: a.lap.map(|l| g.mul_row(l, row)),
        ..*a
    }
}

/// Multiplies by a B×1 column that does not depend on x (e.g. time).
pub fn mul_col(g: &mut Graph, a: &Jet, col: Tensor) -> Jet {
    let jac = a.jac.map(|j| {
        let rep = g.repeat_rows(col, a.dirs);
        g.mul_col(j, rep)
    });
    Jet {
        val: g.mul_col(a.val, col),
        jac,
        lap: a.lap.map(|l| g.mul_col(l, col)),
        ..*a
    }
}

/// `x ↦ x · wᵀ (+ bias)` with `w` stored (out × in).
pub fn linear(g: &mut Graph, a: &Jet, w: Tensor, bias: Option<Tensor>) -> Jet {
    let v = g.matmul_nt(a.val, w);
    let val = match bias {
        Some(b) => g.add_row(v, b),
        None => v,
    };
    Jet {
        val,
        jac: a.jac.map(|j| g.matmul_nt(j, w)),
        lap: a.lap.map(|l| g.matmul_nt(l, w)),
        ..*a
    }
}

/// Row sums: B×n → B×1.
pub fn sum_cols(g: &mut Graph, a: &Jet) -> Jet {
    Jet {
        val: g.sum_cols(a.val),
        jac: a.jac.map(|j| g.sum_cols(j)),
        lap: a.lap.map(|l| g.sum_cols(l)),
        ..*a
    }
}

pub fn columns(g: &mut Graph, a: &Jet, start: usize, len: usize) -> Jet {
    Jet {
        val: g.columns(a.val, start, len),
        jac: a.jac.map(|j| g.columns(j, start, len)),
        lap: a.lap.map(|l| g.columns(l, start, len)),
        ..*a
    }
}

/// Column-wise concatenation; absent derivative parts are filled with zeros.
pub fn concat(g: &mut Graph, parts: &[Jet]) -> Jet {
    assert!(!parts.is_empty());
    let dirs = parts.iter().map(|p| p.dirs).max().unwrap();
    let order = parts.iter().map(|p| p.order).max().unwrap();
    let vals: Vec<Tensor> = parts.iter().map(|p| p.val).collect();
    let val = g.concat(&vals);
    let b = g.shape(val).0;

    let jac = if parts.iter().any(|p| p.jac.is_some()) {
        let js: Vec<Tensor> = parts
            .iter()
            .map(|p| match p.jac {
                Some(j) => j,
                None => {
                    let n = g.shape(p.val).1;
                    g.filled(b * dirs, n, 0.0)
                }
            })
            .collect();
        Some(g.concat(&js))
    } else {
        None
    };
    let lap = if parts.iter().any(|p| p.lap.is_some()) {
        let ls: Vec<Tensor> = parts.iter().map(|p| p.laplacian(g)).collect();
        Some(g.concat(&ls))
    } else {
        None
    };
    Jet {
        val,
        jac,
        lap,
        dirs,
        order,
    }
}

/// Chain rule for a composition `h(u)` given `h(u)`, `h'(u)`, `h''(u)` as nodes.
fn compose(g: &mut Graph, a: &Jet, y: Tensor, d1: Option<Tensor>, d2: Option<Tensor>) -> Jet {
    let jac = match (a.jac, d1) {
        (Some(j), Some(d1)) => {
            let rep = g.repeat_rows(d1, a.dirs);
            Some(g.mul(rep, j))
        }
        _ => None,
    };
    let mut lap = match (a.lap, d1) {
        (Some(l), Some(d1)) => Some(g.mul(d1, l)),
        _ => None,
    };
    if a.order == JetOrder::Laplacian {
        if let (Some(j), Some(d2)) = (a.jac, d2) {
            let j2 = g.square(j);
            let s = g.group_sum(j2, a.dirs);
            let curv = g.mul(d2, s);
            lap = opt_add(g, lap, Some(curv));
        }
    }
    Jet {
        val: y,
        jac,
        lap,
        ..*a
    }
}

pub fn activation(g: &mut Graph, a: &Jet, act: Activation) -> Jet {
    let need1 = a.order >= JetOrder::Gradient && a.jac.is_some();
    let need2 = a.order == JetOrder::Laplacian && a.jac.is_some();
    let u = a.val;
    match act {
        Activation::Tanh => {
            let y = g.tanh(u);
            let (d1, d2) = if need1 {
                let y2 = g.square(y);
                let ny2 = g.neg(y2);
                let d1 = g.offset(ny2, 1.0);
                let d2 = if need2 {
                    let yd = g.mul(y, d1);
                    Some(g.scale(yd, -2.0))
                } else {
                    None
                };
                (Some(d1), d2)
            } else {
                (None, None)
            };
            compose(g, a, y, d1, d2)
        }
        Activation::SmoothAbs => {
            let y = g.smooth_abs(u);
            let (d1, d2) = if need1 {
                let d1 = g.tanh(u);
                let d2 = if need2 {
                    let t2 = g.square(d1);
                    let nt2 = g.neg(t2);
                    Some(g.offset(nt2, 1.0))
                } else {
                    None
                };
                (Some(d1), d2)
            } else {
                (None, None)
            };
            compose(g, a, y, d1, d2)
        }
        Activation::Exp => {
            let y = g.exp(u);
            compose(g, a, y, need1.then_some(y), need2.then_some(y))
        }
        Activation::Square => {
            let y = g.square(u);
            let d1 = need1.then(|| g.scale(u, 2.0));
            let d2 = need2.then(|| {
                let (b, n) = g.shape(u);
                g.filled(b, n, 2.0)
            });
            compose(g, a, y, d1, d2)
        }
    }
}

/// Elementwise product rule.
pub fn mul(g: &mut Graph, a: &Jet, b: &Jet) -> Jet {
    let (dirs, order) = a.merge(b);
    let val = g.mul(a.val, b.val);
    let ja = a.jac.map(|j| {
        let rb = g.repeat_rows(b.val, dirs);
        g.mul(rb, j)
    });
    let jb = b.jac.map(|j| {
        let ra = g.repeat_rows(a.val, dirs);
        g.mul(ra, j)
    });
    let jac = opt_add(g, ja, jb);

    let la = a.lap.map(|l| g.mul(b.val, l));
    let lb = b.lap.map(|l| g.mul(a.val, l));
    let mut lap = opt_add(g, la, lb);
    if order == JetOrder::Laplacian {
        if let (Some(x), Some(y)) = (a.jac, b.jac) {
            let xy = g.mul(x, y);
            let s = g.group_sum(xy, dirs);
            let cross = g.scale(s, 2.0);
            lap = opt_add(g, lap, Some(cross));
        }
    }
    Jet {
        val,
        jac,
        lap,
        dirs,
        order,
    }
}
