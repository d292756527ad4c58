//! Central finite differences, used as an independent check on exact derivatives.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central-difference divergence of a field `f: ℝᵈ → ℝᵈ`.
pub fn divergence(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> f64 {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p)[i];
            p[i] = x[i] - h;
            let down = f(&p)[i];
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .sum()
}

/// Second-difference Laplacian of a scalar field.
pub fn laplacian(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> f64 {
    let f0 = f(x);
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - 2.0 * f0 + down) / (h * h)
        })
        .sum()
}

/// Central-difference derivative of a scalar function of one variable.
pub fn derivative(f: impl Fn(f64) -> f64, t: f64, h: f64) -> f64 {
    (f(t + h) - f(t - h)) / (2.0 * h)
}
