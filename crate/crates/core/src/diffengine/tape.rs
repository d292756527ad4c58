//! Tensor-level reverse-mode tape.
//!
//! Every node holds a dense row-major `Array2<f64>`; batches are rows. Ops are
//! recorded eagerly (values are computed when the node is pushed), so reading
//! a value never triggers work. Two reverse sweeps are provided:
//!
//! * [`Graph::backward`] / [`Graph::backward_seeded`] compute adjoint *values*
//!   and record nothing. This is the hot path used by training.
//! * [`Graph::grad`] records the adjoint computation as new nodes, so the
//!   result can itself be differentiated (reverse-over-reverse). This is what
//!   Hessian-vector products are built on.
//!
//! Shape mismatches inside a graph are programming errors and panic; public
//! entry points that accept user data validate shapes up front.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tensor(usize);

impl Tensor {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f64),
    Offset(Tensor),
    Square(Tensor),
    Exp(Tensor),
    Ln(Tensor),
    Tanh(Tensor),
    SmoothAbs(Tensor),
    MatMul {
        a: Tensor,
        b: Tensor,
        ta: bool,
        tb: bool,
    },
    AddRow(Tensor, Tensor),
    MulRow(Tensor, Tensor),
    MulCol(Tensor, Tensor),
    RepeatRows(Tensor, usize),
    GroupSum(Tensor, usize),
    SumCols(Tensor),
    BroadcastCols(Tensor),
    SumRows(Tensor),
    BroadcastRows(Tensor),
    SumAll(Tensor),
    BroadcastAll(Tensor),
    Columns(Tensor, usize),
    PadCols(Tensor, usize),
    Concat(Vec<Tensor>),
    Reshape(Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Square(..) => "square",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Tanh(..) => "tanh",
            Op::SmoothAbs(..) => "smooth_abs",
            Op::MatMul { .. } => "matmul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::RepeatRows(..) => "repeat_rows",
            Op::GroupSum(..) => "group_sum",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumAll(..) => "sum_all",
            Op::BroadcastAll(..) => "broadcast_all",
            Op::Columns(..) => "columns",
            Op::PadCols(..) => "pad_cols",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Tanh(a)
            | Op::SmoothAbs(a)
            | Op::RepeatRows(a, _)
            | Op::GroupSum(a, _)
            | Op::SumCols(a)
            | Op::BroadcastCols(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a)
            | Op::SumAll(a)
            | Op::BroadcastAll(a)
            | Op::Columns(a, _)
            | Op::PadCols(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// `log(eˣ + e⁻ˣ)`, evaluated as `|x| + log1p(e^(−2|x|))` so it cannot overflow.
/// Its derivative is `tanh(x)`.
pub fn smooth_abs(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p()
}

fn matmul(a: ArrayView2<f64>, ta: bool, b: ArrayView2<f64>, tb: bool) -> Array2<f64> {
    let a = if ta { a.reversed_axes() } else { a };
    let b = if tb { b.reversed_axes() } else { b };
    a.dot(&b)
}

fn zip_with(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    assert_eq!(a.dim(), b.dim(), "elementwise shape mismatch");
    let mut out = Array2::zeros(a.dim());
    Zip::from(&mut out)
        .and(a)
        .and(b)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn repeat_rows(a: &Array2<f64>, k: usize) -> Array2<f64> {
    let (r, c) = a.dim();
    let mut out = Array2::zeros((r * k, c));
    for (i, row) in a.outer_iter().enumerate() {
        for j in 0..k {
            out.row_mut(i * k + j).assign(&row);
        }
    }
    out
}

fn group_sum(a: &Array2<f64>, k: usize) -> Array2<f64> {
    let (r, c) = a.dim();
    assert!(k > 0 && r % k == 0, "group_sum: {r} rows not divisible by {k}");
    let mut out = Array2::zeros((r / k, c));
    for (i, mut orow) in out.outer_iter_mut().enumerate() {
        for j in 0..k {
            orow += &a.row(i * k + j);
        }
    }
    out
}

fn reshape(a: &Array2<f64>, r: usize, c: usize) -> Array2<f64> {
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((r, c))
        .expect("reshape: element count mismatch")
}

fn pad_cols(a: &Array2<f64>, start: usize, total: usize) -> Array2<f64> {
    let (r, c) = a.dim();
    let mut out = Array2::zeros((r, total));
    out.slice_mut(s![.., start..start + c]).assign(a);
    out
}

/// A recording of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Tensor {
        let requires_grad = op.inputs().iter().any(|t| self.nodes[t.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(&mut self, value: Array2<f64>) -> Tensor {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Tensor(self.nodes.len() - 1)
    }

    /// A leaf that is treated as fixed data.
    pub fn constant(&mut self, value: Array2<f64>) -> Tensor {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Tensor(self.nodes.len() - 1)
    }

    pub fn filled(&mut self, rows: usize, cols: usize, v: f64) -> Tensor {
        self.constant(Array2::from_elem((rows, cols), v))
    }

    pub fn value(&self, t: Tensor) -> &Array2<f64> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.nodes[t.0].value.dim()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, t: Tensor) -> f64 {
        let v = self.value(t);
        assert_eq!(v.dim(), (1, 1), "scalar() on a non-scalar node");
        v[[0, 0]]
    }

    pub fn op_name(&self, t: Tensor) -> &'static str {
        self.nodes[t.0].op.name()
    }

    /// The first node (in recording order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Tensor, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (Tensor(i), n.op.name()))
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = zip_with(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = zip_with(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = zip_with(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = zip_with(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let v = self.value(a).mapv(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Tensor, c: f64) -> Tensor {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::Offset(a))
    }

    pub fn square(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn smooth_abs(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(smooth_abs);
        self.push(v, Op::SmoothAbs(a))
    }

    // ---- linear algebra ---------------------------------------------------

    fn matmul_op(&mut self, a: Tensor, b: Tensor, ta: bool, tb: bool) -> Tensor {
        let v = matmul(self.value(a).view(), ta, self.value(b).view(), tb);
        self.push(v, Op::MatMul { a, b, ta, tb })
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.matmul_op(a, b, false, false)
    }

    /// `a · bᵀ`; with `b` a weight matrix stored (out × in) this is a dense layer.
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.matmul_op(a, b, false, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.matmul_op(a, b, true, false)
    }

    /// `a + r` with the 1×m row `r` broadcast over rows.
    pub fn add_row(&mut self, a: Tensor, r: Tensor) -> Tensor {
        assert_eq!(self.shape(r), (1, self.shape(a).1), "add_row shape");
        let v = self.value(a) + self.value(r);
        self.push(v, Op::AddRow(a, r))
    }

    /// `a ⊙ r` with the 1×m row `r` broadcast over rows.
    pub fn mul_row(&mut self, a: Tensor, r: Tensor) -> Tensor {
        assert_eq!(self.shape(r), (1, self.shape(a).1), "mul_row shape");
        let v = self.value(a) * self.value(r);
        self.push(v, Op::MulRow(a, r))
    }

    /// `a ⊙ c` with the n×1 column `c` broadcast over columns.
    pub fn mul_col(&mut self, a: Tensor, c: Tensor) -> Tensor {
        assert_eq!(self.shape(c), (self.shape(a).0, 1), "mul_col shape");
        let v = self.value(a) * self.value(c);
        self.push(v, Op::MulCol(a, c))
    }

    // ---- structural -------------------------------------------------------

    /// Row `i` of the input becomes rows `i·k .. i·k + k` of the output.
    pub fn repeat_rows(&mut self, a: Tensor, k: usize) -> Tensor {
        let v = repeat_rows(self.value(a), k);
        self.push(v, Op::RepeatRows(a, k))
    }

    /// Sums consecutive blocks of `k` rows; the adjoint of [`Graph::repeat_rows`].
    pub fn group_sum(&mut self, a: Tensor, k: usize) -> Tensor {
        let v = group_sum(self.value(a), k);
        self.push(v, Op::GroupSum(a, k))
    }

    /// n×m → n×1
    pub fn sum_cols(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    /// n×1 → n×m
    pub fn broadcast_cols(&mut self, a: Tensor, m: usize) -> Tensor {
        let (n, c) = self.shape(a);
        assert_eq!(c, 1, "broadcast_cols needs a column");
        let v = self.value(a).broadcast((n, m)).unwrap().to_owned();
        self.push(v, Op::BroadcastCols(a))
    }

    /// n×m → 1×m
    pub fn sum_rows(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    /// 1×m → n×m
    pub fn broadcast_rows(&mut self, a: Tensor, n: usize) -> Tensor {
        let (r, m) = self.shape(a);
        assert_eq!(r, 1, "broadcast_rows needs a row");
        let v = self.value(a).broadcast((n, m)).unwrap().to_owned();
        self.push(v, Op::BroadcastRows(a))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// 1×1 → n×m
    pub fn broadcast_all(&mut self, a: Tensor, n: usize, m: usize) -> Tensor {
        let v = Array2::from_elem((n, m), self.scalar(a));
        self.push(v, Op::BroadcastAll(a))
    }

    /// Columns `start .. start + len`.
    pub fn columns(&mut self, a: Tensor, start: usize, len: usize) -> Tensor {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::Columns(a, start))
    }

    /// Embeds `a` at column `start` of a zero matrix with `total` columns.
    pub fn pad_cols(&mut self, a: Tensor, start: usize, total: usize) -> Tensor {
        let v = pad_cols(self.value(a), start, total);
        self.push(v, Op::PadCols(a, start))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Tensor]) -> Tensor {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat: row counts differ");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Tensor, rows: usize, cols: usize) -> Tensor {
        let v = reshape(self.value(a), rows, cols);
        self.push(v, Op::Reshape(a))
    }

    // ---- reverse sweeps ---------------------------------------------------

    /// Gradient values of the 1×1 node `out` with respect to `wrt`.
    pub fn backward(&self, out: Tensor, wrt: &[Tensor]) -> Vec<Array2<f64>> {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        self.backward_seeded(out, &Array2::ones((1, 1)), wrt)
    }

    /// Vector-Jacobian product: adjoints of `wrt` given the adjoint `seed` of `out`.
    pub fn backward_seeded(
        &self,
        out: Tensor,
        seed: &Array2<f64>,
        wrt: &[Tensor],
    ) -> Vec<Array2<f64>> {
        assert_eq!(seed.dim(), self.shape(out), "seed shape");
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; out.0 + 1];
        let mut keep: HashMap<usize, Array2<f64>> = HashMap::new();
        let wanted: Vec<usize> = wrt.iter().map(|t| t.0).collect();
        adj[out.0] = Some(seed.clone());

        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if wanted.contains(&i) {
                keep.insert(i, g.clone());
            }
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.vjp(&node.op, &node.value, &g, &mut adj);
        }

        wrt.iter()
            .map(|t| {
                keep.remove(&t.0)
                    .unwrap_or_else(|| Array2::zeros(self.shape(*t)))
            })
            .collect()
    }

    fn vjp(
        &self,
        op: &Op,
        y: &Array2<f64>,
        g: &Array2<f64>,
        adj: &mut [Option<Array2<f64>>],
    ) {
        let val = |t: &Tensor| &self.nodes[t.0].value;
        let needs = |t: &Tensor| self.nodes[t.0].requires_grad;
        let mut acc = |t: Tensor, contrib: Array2<f64>| match &mut adj[t.0] {
            Some(a) => *a += &contrib,
            slot @ None => *slot = Some(contrib),
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(a) {
                    acc(*a, g.clone());
                }
                if needs(b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    acc(*a, g.clone());
                }
                if needs(b) {
                    acc(*b, g.mapv(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    acc(*a, g * val(b));
                }
                if needs(b) {
                    acc(*b, g * val(a));
                }
            }
            Op::Div(a, b) => {
                if needs(a) {
                    acc(*a, g / val(b));
                }
                if needs(b) {
                    let mut c = zip_with(g, y, |gv, yv| -gv * yv);
                    c /= val(b);
                    acc(*b, c);
                }
            }
            Op::Neg(a) => acc(*a, g.mapv(|v| -v)),
            Op::Scale(a, c) => acc(*a, g.mapv(|v| c * v)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Square(a) => acc(*a, zip_with(g, val(a), |gv, x| 2.0 * gv * x)),
            Op::Exp(a) => acc(*a, g * y),
            Op::Ln(a) => acc(*a, g / val(a)),
            Op::Tanh(a) => acc(*a, zip_with(g, y, |gv, t| gv * (1.0 - t * t))),
            Op::SmoothAbs(a) => acc(*a, zip_with(g, val(a), |gv, x| gv * x.tanh())),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(a).view(), val(b).view());
                let gv = g.view();
                if needs(a) {
                    let ga = match (ta, tb) {
                        (false, false) => matmul(gv, false, bv, true),
                        (false, true) => matmul(gv, false, bv, false),
                        (true, false) => matmul(bv, false, gv, true),
                        (true, true) => matmul(bv, true, gv, true),
                    };
                    acc(*a, ga);
                }
                if needs(b) {
                    let gb = match (ta, tb) {
                        (false, false) => matmul(av, true, gv, false),
                        (false, true) => matmul(gv, true, av, false),
                        (true, false) => matmul(av, false, gv, false),
                        (true, true) => matmul(gv, true, av, true),
                    };
                    acc(*b, gb);
                }
            }
            Op::AddRow(a, r) => {
                if needs(a) {
                    acc(*a, g.clone());
                }
                if needs(r) {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if needs(a) {
                    acc(*a, g * val(r));
                }
                if needs(r) {
                    acc(*r, (g * val(a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, c) => {
                if needs(a) {
                    acc(*a, g * val(c));
                }
                if needs(c) {
                    acc(*c, (g * val(a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::RepeatRows(a, k) => acc(*a, group_sum(g, *k)),
            Op::GroupSum(a, k) => acc(*a, repeat_rows(g, *k)),
            Op::SumCols(a) => {
                let m = val(a).ncols();
                acc(*a, g.broadcast((g.nrows(), m)).unwrap().to_owned());
            }
            Op::BroadcastCols(a) => acc(*a, g.sum_axis(Axis(1)).insert_axis(Axis(1))),
            Op::SumRows(a) => {
                let n = val(a).nrows();
                acc(*a, g.broadcast((n, g.ncols())).unwrap().to_owned());
            }
            Op::BroadcastRows(a) => acc(*a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::SumAll(a) => acc(*a, Array2::from_elem(val(a).dim(), g[[0, 0]])),
            Op::BroadcastAll(a) => acc(*a, Array2::from_elem((1, 1), g.sum())),
            Op::Columns(a, start) => {
                let total = val(a).ncols();
                acc(*a, pad_cols(g, *start, total));
            }
            Op::PadCols(a, start) => {
                let len = val(a).ncols();
                acc(*a, g.slice(s![.., *start..*start + len]).to_owned());
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(p).ncols();
                    if needs(p) {
                        acc(*p, g.slice(s![.., off..off + len]).to_owned());
                    }
                    off += len;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = val(a).dim();
                acc(*a, reshape(g, r, c));
            }
        }
    }

    /// Records the gradient of the 1×1 node `out` with respect to `wrt` as new
    /// nodes, so that the result can be differentiated again.
    pub fn grad(&mut self, out: Tensor, wrt: &[Tensor]) -> Vec<Tensor> {
        assert_eq!(self.shape(out), (1, 1), "grad needs a scalar output");
        let seed = self.filled(1, 1, 1.0);
        self.grad_seeded(out, seed, wrt)
    }

    /// Recorded vector-Jacobian product with adjoint `seed` (a node) for `out`.
    pub fn grad_seeded(&mut self, out: Tensor, seed: Tensor, wrt: &[Tensor]) -> Vec<Tensor> {
        assert_eq!(self.shape(seed), self.shape(out), "seed shape");
        let mut adj: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        let mut keep: HashMap<usize, Tensor> = HashMap::new();
        let wanted: Vec<usize> = wrt.iter().map(|t| t.0).collect();
        adj[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if wanted.contains(&i) {
                keep.insert(i, g);
            }
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.vjp_recorded(&op, Tensor(i), g, &mut adj);
        }

        wrt.iter()
            .map(|t| match keep.remove(&t.0) {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*t);
                    self.filled(r, c, 0.0)
                }
            })
            .collect()
    }

    fn vjp_recorded(&mut self, op: &Op, y: Tensor, g: Tensor, adj: &mut [Option<Tensor>]) {
        fn acc(graph: &mut Graph, adj: &mut [Option<Tensor>], t: Tensor, c: Tensor) {
            adj[t.0] = Some(match adj[t.0] {
                Some(prev) => graph.add(prev, c),
                None => c,
            });
        }
        let needs = |graph: &Graph, t: &Tensor| graph.nodes[t.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(self, a) {
                    acc(self, adj, *a, g);
                }
                if needs(self, b) {
                    acc(self, adj, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if needs(self, a) {
                    acc(self, adj, *a, g);
                }
                if needs(self, b) {
                    let c = self.neg(g);
                    acc(self, adj, *b, c);
                }
            }
            Op::Mul(a, b) => {
                if needs(self, a) {
                    let c = self.mul(g, *b);
                    acc(self, adj, *a, c);
                }
                if needs(self, b) {
                    let c = self.mul(g, *a);
                    acc(self, adj, *b, c);
                }
            }
            Op::Div(a, b) => {
                if needs(self, a) {
                    let c = self.div(g, *b);
                    acc(self, adj, *a, c);
                }
                if needs(self, b) {
                    let gy = self.mul(g, y);
                    let q = self.div(gy, *b);
                    let c = self.neg(q);
                    acc(self, adj, *b, c);
                }
            }
            Op::Neg(a) => {
                let c = self.neg(g);
                acc(self, adj, *a, c);
            }
            Op::Scale(a, k) => {
                let c = self.scale(g, *k);
                acc(self, adj, *a, c);
            }
            Op::Offset(a) => acc(self, adj, *a, g),
            Op::Square(a) => {
                let ga = self.mul(g, *a);
                let c = self.scale(ga, 2.0);
                acc(self, adj, *a, c);
            }
            Op::Exp(a) => {
                let c = self.mul(g, y);
                acc(self, adj, *a, c);
            }
            Op::Ln(a) => {
                let c = self.div(g, *a);
                acc(self, adj, *a, c);
            }
            Op::Tanh(a) => {
                let y2 = self.square(y);
                let ny2 = self.neg(y2);
                let d = self.offset(ny2, 1.0);
                let c = self.mul(g, d);
                acc(self, adj, *a, c);
            }
            Op::SmoothAbs(a) => {
                let d = self.tanh(*a);
                let c = self.mul(g, d);
                acc(self, adj, *a, c);
            }
            Op::MatMul { a, b, ta, tb } => {
                if needs(self, a) {
                    let c = match (ta, tb) {
                        (false, false) => self.matmul_op(g, *b, false, true),
                        (false, true) => self.matmul_op(g, *b, false, false),
                        (true, false) => self.matmul_op(*b, g, false, true),
                        (true, true) => self.matmul_op(*b, g, true, true),
                    };
                    acc(self, adj, *a, c);
                }
                if needs(self, b) {
                    let c = match (ta, tb) {
                        (false, false) => self.matmul_op(*a, g, true, false),
                        (false, true) => self.matmul_op(g, *a, true, false),
                        (true, false) => self.matmul_op(*a, g, false, false),
                        (true, true) => self.matmul_op(g, *a, true, true),
                    };
                    acc(self, adj, *b, c);
                }
            }
            Op::AddRow(a, r) => {
                if needs(self, a) {
                    acc(self, adj, *a, g);
                }
                if needs(self, r) {
                    let c = self.sum_rows(g);
                    acc(self, adj, *r, c);
                }
            }
            Op::MulRow(a, r) => {
                if needs(self, a) {
                    let c = self.mul_row(g, *r);
                    acc(self, adj, *a, c);
                }
                if needs(self, r) {
                    let ga = self.mul(g, *a);
                    let c = self.sum_rows(ga);
                    acc(self, adj, *r, c);
                }
            }
            Op::MulCol(a, col) => {
                if needs(self, a) {
                    let c = self.mul_col(g, *col);
                    acc(self, adj, *a, c);
                }
                if needs(self, col) {
                    let ga = self.mul(g, *a);
                    let c = self.sum_cols(ga);
                    acc(self, adj, *col, c);
                }
            }
            Op::RepeatRows(a, k) => {
                let c = self.group_sum(g, *k);
                acc(self, adj, *a, c);
            }
            Op::GroupSum(a, k) => {
                let c = self.repeat_rows(g, *k);
                acc(self, adj, *a, c);
            }
            Op::SumCols(a) => {
                let m = self.shape(*a).1;
                let c = self.broadcast_cols(g, m);
                acc(self, adj, *a, c);
            }
            Op::BroadcastCols(a) => {
                let c = self.sum_cols(g);
                acc(self, adj, *a, c);
            }
            Op::SumRows(a) => {
                let n = self.shape(*a).0;
                let c = self.broadcast_rows(g, n);
                acc(self, adj, *a, c);
            }
            Op::BroadcastRows(a) => {
                let c = self.sum_rows(g);
                acc(self, adj, *a, c);
            }
            Op::SumAll(a) => {
                let (n, m) = self.shape(*a);
                let c = self.broadcast_all(g, n, m);
                acc(self, adj, *a, c);
            }
            Op::BroadcastAll(a) => {
                let c = self.sum_all(g);
                acc(self, adj, *a, c);
            }
            Op::Columns(a, start) => {
                let total = self.shape(*a).1;
                let c = self.pad_cols(g, *start, total);
                acc(self, adj, *a, c);
            }
            Op::PadCols(a, start) => {
                let len = self.shape(*a).1;
                let c = self.columns(g, *start, len);
                acc(self, adj, *a, c);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.shape(*p).1;
                    if needs(self, p) {
                        let c = self.columns(g, off, len);
                        acc(self, adj, *p, c);
                    }
                    off += len;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                let back = self.reshape(g, r, c);
                acc(self, adj, *a, back);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(array![[3.0]]);
        let y = g.square(x);
        let gx = g.backward(y, &[x]);
        assert_eq!(gx[0][[0, 0]], 6.0);
    }

    #[test]
    fn smooth_abs_is_overflow_free() {
        assert!((smooth_abs(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(smooth_abs(800.0), 800.0);
        assert_eq!(smooth_abs(-800.0), 800.0);
        // naive form overflows here
        assert!(((800f64).exp() + (-800f64).exp()).ln().is_infinite());
    }

    #[test]
    fn smooth_abs_derivative_is_tanh() {
        for i in 0..=400 {
            let x = -20.0 + 0.1 * i as f64;
            let mut g = Graph::new();
            let t = g.param(array![[x]]);
            let y = g.smooth_abs(t);
            let s = g.sum_all(y);
            let d = g.backward(s, &[t])[0][[0, 0]];
            assert!((d - x.tanh()).abs() < 1e-10, "x = {x}");
        }
    }

    #[test]
    fn repeat_and_group_sum_are_adjoint() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let r = repeat_rows(&a, 3);
        assert_eq!(r.dim(), (6, 2));
        assert_eq!(r.row(4), a.row(1));
        assert_eq!(group_sum(&r, 3), a.mapv(|v| 3.0 * v));
    }

    #[test]
    fn matmul_variants_match_vjp_of_each_other() {
        let a = array![[1.0, -2.0, 0.5], [0.3, 0.7, -1.1]];
        let b = array![[0.2, 0.4, -0.6], [1.5, -0.5, 0.25]];
        for (ta, tb) in [(false, true), (true, false)] {
            let mut g = Graph::new();
            let pa = g.param(a.clone());
            let pb = g.param(b.clone());
            let y = g.matmul_op(pa, pb, ta, tb);
            let s = g.sum_all(y);
            let numeric = g.backward(s, &[pa, pb]);
            let recorded = g.grad(s, &[pa, pb]);
            for (n, r) in numeric.iter().zip(&recorded) {
                assert_eq!(n, g.value(*r));
            }
        }
    }

    #[test]
    fn non_finite_is_located() {
        let mut g = Graph::new();
        let x = g.constant(array![[-1.0]]);
        let y = g.ln(x);
        let _ = g.exp(y);
        let (t, name) = g.first_non_finite().unwrap();
        assert_eq!(t, y);
        assert_eq!(name, "ln");
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut g = Graph::new();
        let c = g.constant(array![[2.0]]);
        let x = g.param(array![[5.0]]);
        let y = g.mul(c, x);
        let grads = g.backward(y, &[x, c]);
        assert_eq!(grads[0][[0, 0]], 2.0);
        assert_eq!(grads[1][[0, 0]], 0.0);
    }
}
