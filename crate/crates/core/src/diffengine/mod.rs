//! Exact derivatives for the solver.
//!
//! [`tape`] is a reverse-mode tape over dense matrices and [`jet`] layers
//! second-order forward propagation on top of it. This module adds the
//! query-level operations: parameter gradients, input gradients, Jacobian
//! traces and Hessian traces of batched fields. Fields act row-wise: row `b`
//! of the output may depend only on row `b` of the input.

pub mod fd;
pub mod jet;
pub mod tape;

use ndarray::{Array1, Array2};
use rand::Rng;

pub use jet::{Activation, Jet, JetOrder};
pub use tape::{Graph, Tensor};

use crate::error::{Error, Result};

/// A named real matrix (vectors are stored as 1×n rows).
#[derive(Clone, Debug, PartialEq)]
pub struct Variable {
    pub name: String,
    pub value: Array2<f64>,
}

/// Ordered collection of named variables, e.g. the parameters of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VariableSet {
    vars: Vec<Variable>,
}

impl VariableSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a variable; names are unique within a set.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<usize> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(Error::Config(format!("variable `{name}` registered twice")));
        }
        self.vars.push(Variable { name, value });
        Ok(self.vars.len() - 1)
    }

    pub fn with(mut self, name: impl Into<String>, value: Array2<f64>) -> Result<Self> {
        self.insert(name, value)?;
        Ok(self)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.position(name)
            .map(|i| &self.vars[i].value)
            .ok_or_else(|| Error::Config(format!("unknown variable `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.vars.iter().map(|v| v.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Variable> {
        self.vars.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Variable> {
        self.vars.iter_mut()
    }

    pub fn value(&self, i: usize) -> &Array2<f64> {
        &self.vars[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.vars[i].value
    }

    pub fn name(&self, i: usize) -> &str {
        &self.vars[i].name
    }

    /// Places every variable on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bindings {
        let tensors = self
            .vars
            .iter()
            .map(|v| {
                if trainable {
                    g.param(v.value.clone())
                } else {
                    g.constant(v.value.clone())
                }
            })
            .collect();
        Bindings {
            names: self.vars.iter().map(|v| v.name.clone()).collect(),
            tensors,
        }
    }
}

/// Tape handles for a bound [`VariableSet`], in registration order.
#[derive(Clone, Debug)]
pub struct Bindings {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Bindings {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> Tensor {
        self.tensors[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named(&self, name: &str) -> Result<Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.tensors[i])
            .ok_or_else(|| Error::Config(format!("unknown variable `{name}`")))
    }
}

/// Result of [`gradient`]: the function value and one gradient per variable.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub value: f64,
    names: Vec<String>,
    grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub(crate) fn new(value: f64, names: Vec<String>, grads: Vec<Array2<f64>>) -> Self {
        Self {
            value,
            names,
            grads,
        }
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.grads[i])
            .ok_or_else(|| Error::Config(format!("no gradient for unregistered variable `{name}`")))
    }

    pub fn all(&self) -> &[Array2<f64>] {
        &self.grads
    }

    pub fn into_vec(self) -> Vec<Array2<f64>> {
        self.grads
    }
}

/// Fails with the offending primitive if any node of `g` is non-finite.
pub fn ensure_finite(g: &Graph) -> Result<()> {
    match g.first_non_finite() {
        Some((_, op)) => Err(Error::numeric(op)),
        None => Ok(()),
    }
}

fn ensure_finite_grads(grads: &[Array2<f64>]) -> Result<()> {
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        Err(Error::numeric("reverse sweep"))
    } else {
        Ok(())
    }
}

/// Gradient of a scalar computation with respect to every variable in `vars`.
pub fn gradient<F>(vars: &VariableSet, f: F) -> Result<Gradients>
where
    F: FnOnce(&mut Graph, &Bindings) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let b = vars.bind(&mut g, true);
    let out = f(&mut g, &b)?;
    if g.shape(out) != (1, 1) {
        return Err(Error::shape("gradient", "1x1", format!("{:?}", g.shape(out))));
    }
    ensure_finite(&g)?;
    let grads = g.backward(out, b.tensors());
    ensure_finite_grads(&grads)?;
    Ok(Gradients::new(g.scalar(out), b.names.clone(), grads))
}

fn check_field(g: &Graph, x: Tensor, y: Tensor, context: &'static str) -> Result<()> {
    if g.shape(y) != g.shape(x) {
        return Err(Error::shape(
            context,
            format!("{:?}", g.shape(x)),
            format!("{:?}", g.shape(y)),
        ));
    }
    Ok(())
}

/// Per-row gradient of a scalar field (B×1 output) at the rows of `x`.
pub fn input_gradient<F>(f: F, x: &Array2<f64>) -> Result<Array2<f64>>
where
    F: FnOnce(&mut Graph, Tensor) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let xt = g.param(x.clone());
    let y = f(&mut g, xt)?;
    if g.shape(y) != (x.nrows(), 1) {
        return Err(Error::shape("input_gradient", format!("({}, 1)", x.nrows()), format!("{:?}", g.shape(y))));
    }
    ensure_finite(&g)?;
    let s = g.sum_all(y);
    let gx = g.backward(s, &[xt]).remove(0);
    ensure_finite_grads(std::slice::from_ref(&gx))?;
    Ok(gx)
}

/// Exact divergence `Σᵢ ∂Fᵢ/∂xᵢ` of a field ℝᵈ → ℝᵈ at each row of `x`,
/// from `d` vector-Jacobian products.
pub fn divergence<F>(f: F, x: &Array2<f64>) -> Result<Array1<f64>>
where
    F: FnOnce(&mut Graph, Tensor) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let xt = g.param(x.clone());
    let y = f(&mut g, xt)?;
    check_field(&g, xt, y, "divergence")?;
    ensure_finite(&g)?;
    Ok(trace_of_jacobian(&g, y, xt))
}

fn trace_of_jacobian(g: &Graph, y: Tensor, x: Tensor) -> Array1<f64> {
    let (b, d) = g.shape(x);
    let mut div = Array1::zeros(b);
    for i in 0..d {
        let mut seed = Array2::zeros((b, d));
        seed.column_mut(i).fill(1.0);
        let row = g.backward_seeded(y, &seed, &[x]).remove(0);
        div += &row.column(i);
    }
    div
}

/// Hutchinson estimate of the divergence with `probes` Rademacher vectors.
pub fn divergence_hutchinson<F, R>(f: F, x: &Array2<f64>, probes: usize, rng: &mut R) -> Result<Array1<f64>>
where
    F: FnOnce(&mut Graph, Tensor) -> Result<Tensor>,
    R: Rng + ?Sized,
{
    if probes == 0 {
        return Err(Error::Config("Hutchinson estimator needs at least one probe".into()));
    }
    let mut g = Graph::new();
    let xt = g.param(x.clone());
    let y = f(&mut g, xt)?;
    check_field(&g, xt, y, "divergence_hutchinson")?;
    ensure_finite(&g)?;
    let (b, d) = x.dim();
    let mut est = Array1::zeros(b);
    for _ in 0..probes {
        let v = Array2::from_shape_fn((b, d), |_| if rng.gen::<bool>() { 1.0 } else { -1.0 });
        let vj = g.backward_seeded(y, &v, &[xt]).remove(0);
        est += &(&vj * &v).sum_axis(ndarray::Axis(1));
    }
    Ok(est / probes as f64)
}

/// Exact Laplacian of a scalar field (B×1 output) at each row of `x`, from
/// `d` Hessian-vector products (reverse-over-reverse).
pub fn hessian_trace<F>(f: F, x: &Array2<f64>) -> Result<Array1<f64>>
where
    F: FnOnce(&mut Graph, Tensor) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let xt = g.param(x.clone());
    let y = f(&mut g, xt)?;
    if g.shape(y) != (x.nrows(), 1) {
        return Err(Error::shape("hessian_trace", format!("({}, 1)", x.nrows()), format!("{:?}", g.shape(y))));
    }
    let s = g.sum_all(y);
    let grad = g.grad(s, &[xt])[0];
    ensure_finite(&g)?;
    Ok(trace_of_jacobian(&g, grad, xt))
}

/// Full per-row Hessians, row-major (B·d)×d, from `d` Hessian-vector products.
pub fn hessian<F>(f: F, x: &Array2<f64>) -> Result<Array2<f64>>
where
    F: FnOnce(&mut Graph, Tensor) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let xt = g.param(x.clone());
    let y = f(&mut g, xt)?;
    let s = g.sum_all(y);
    let grad = g.grad(s, &[xt])[0];
    ensure_finite(&g)?;
    let (b, d) = x.dim();
    let mut h = Array2::zeros((b * d, d));
    for i in 0..d {
        let mut seed = Array2::zeros((b, d));
        seed.column_mut(i).fill(1.0);
        let row = g.backward_seeded(grad, &seed, &[xt]).remove(0);
        for s in 0..b {
            h.row_mut(s * d + i).assign(&row.row(s));
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gradient_of_square_at_three() {
        let vars = VariableSet::new().with("x", array![[3.0]]).unwrap();
        let gr = gradient(&vars, |g, b| {
            let x = b.named("x")?;
            Ok(g.square(x))
        })
        .unwrap();
        assert_eq!(gr.value, 9.0);
        assert_eq!(gr.get("x").unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn gradient_of_smooth_abs_at_zero() {
        let vars = VariableSet::new().with("x", array![[0.0]]).unwrap();
        let gr = gradient(&vars, |g, b| Ok(g.smooth_abs(b.get(0)))).unwrap();
        assert_eq!(gr.get("x").unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn unregistered_variable_is_a_config_error() {
        let vars = VariableSet::new().with("x", array![[1.0]]).unwrap();
        let gr = gradient(&vars, |g, b| Ok(g.square(b.get(0)))).unwrap();
        assert!(matches!(gr.get("theta"), Err(Error::Config(_))));
        let err = gradient(&vars, |_, b| b.named("theta")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn duplicate_registration_rejected() {
        let r = VariableSet::new()
            .with("x", array![[1.0]])
            .unwrap()
            .with("x", array![[2.0]]);
        assert!(r.is_err());
    }

    #[test]
    fn non_finite_reports_primitive() {
        let vars = VariableSet::new().with("x", array![[-1.0]]).unwrap();
        let err = gradient(&vars, |g, b| Ok(g.ln(b.get(0)))).unwrap_err();
        match err {
            Error::NumericFailure { primitive, .. } => assert_eq!(primitive, "ln"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn divergence_shape_mismatch() {
        let x = Array2::zeros((2, 3));
        let err = divergence(|g, x| Ok(g.sum_cols(x)), &x).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn identity_field_divergence_is_dimension() {
        let x = Array2::from_elem((4, 10), 0.3);
        let div = divergence(|_, x| Ok(x), &x).unwrap();
        assert!(div.iter().all(|&v| v == 10.0));
    }

    #[test]
    fn constant_field_divergence_is_zero() {
        // F(x) = 2t·1 at t = 0.7
        let x = Array2::from_elem((3, 4), -1.2);
        let div = divergence(
            |g, x| {
                let z = g.scale(x, 0.0);
                Ok(g.offset(z, 1.4))
            },
            &x,
        )
        .unwrap();
        assert!(div.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_norm_hessian_trace() {
        let x = Array2::from_shape_fn((2, 30), |(i, j)| (i as f64 - 0.5) * 0.1 * j as f64);
        let tr = hessian_trace(
            |g, x| {
                let s = g.square(x);
                let r = g.sum_cols(s);
                Ok(g.scale(r, 0.5))
            },
            &x,
        )
        .unwrap();
        for v in tr {
            assert!((v - 30.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_scalar_field_has_zero_hessian_trace() {
        let x = Array2::from_elem((2, 3), 0.5);
        let tr = hessian_trace(
            |g, x| {
                let c = g.filled(2, 1, 4.0);
                let z = g.sum_cols(x);
                let z = g.scale(z, 0.0);
                Ok(g.add(c, z))
            },
            &x,
        )
        .unwrap();
        assert!(tr.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hutchinson_is_exact_for_diagonal_jacobians() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((3, 5), |(i, j)| 0.2 * i as f64 - 0.1 * j as f64);
        let field = |g: &mut Graph, x: Tensor| Ok(g.tanh(x));
        let exact = divergence(field, &x).unwrap();
        let est = divergence_hutchinson(field, &x, 4, &mut rng).unwrap();
        for (a, b) in exact.iter().zip(&est) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
