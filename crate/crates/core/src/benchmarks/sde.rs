use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fpcore::{Diffusion, FpProblem};

/// Particles per independent random stream.
const BLOCK: usize = 4096;

/// An ensemble of SDE sample paths at a common time.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    pub positions: Array2<f64>,
    pub time: f64,
    pub seed: u64,
}

impl ParticleCloud {
    pub fn new(positions: Array2<f64>, time: f64, seed: u64) -> Result<Self> {
        if positions.nrows() == 0 {
            return Err(Error::Config("particle cloud needs at least one particle".into()));
        }
        if let Some(i) = positions.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::numeric(format!("particle {i}")));
        }
        Ok(Self { positions, time, seed })
    }
}

/// Euler–Maruyama for `dX = μ dt + √2·C dW`, where `D = C Cᵀ`.
///
/// The step is shrunk so that the run ends exactly at `t1`. Noise comes
/// from one ChaCha stream per block of particles, so results depend only on
/// the seed.
pub fn euler_maruyama(problem: &FpProblem, cloud: &ParticleCloud, dt: f64, t1: f64) -> Result<ParticleCloud> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    if !t1.is_finite() || t1 < cloud.time {
        return Err(Error::Config(format!("cannot integrate from t = {} to t = {t1}", cloud.time)));
    }
    problem.validate()?;
    if cloud.positions.ncols() != problem.dim {
        return Err(Error::shape("euler_maruyama", problem.dim, cloud.positions.ncols()));
    }
    let n = cloud.positions.nrows();
    let steps = ((t1 - cloud.time) / dt).ceil() as usize;
    let mut x = cloud.positions.clone();
    if steps == 0 {
        return Ok(ParticleCloud { positions: x, ..cloud.clone() });
    }
    let h = (t1 - cloud.time) / steps as f64;
    let sqrt_2h = (2.0 * h).sqrt();
    let mut rngs: Vec<ChaCha8Rng> = (0..n.div_ceil(BLOCK))
        .map(|b| {
            let mut r = ChaCha8Rng::seed_from_u64(cloud.seed);
            r.set_stream(b as u64);
            r
        })
        .collect();

    for step in 0..steps {
        let t = cloud.time + step as f64 * h;
        let mu = problem.drift_values(&x, t)?;
        x.scaled_add(h, &mu);
        match &problem.diffusion {
            Diffusion::Zero => {}
            Diffusion::Constant { factor, .. } => {
                let k = factor.ncols();
                let xi = noise(&mut rngs, n, k);
                x.scaled_add(sqrt_2h, &xi.dot(&factor.t()));
            }
            Diffusion::Field(f) => {
                let k = f.rank();
                let (_, c) = problem.factor_values(&x, t)?.expect("field diffusion");
                let xi = noise(&mut rngs, n, k);
                for b in 0..n {
                    let cb = c.slice(s![b * k..(b + 1) * k, ..]);
                    let inc = xi.row(b).dot(&cb);
                    x.row_mut(b).scaled_add(sqrt_2h, &inc);
                }
            }
        }
        if let Some(i) = x.axis_iter(Axis(0)).position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::numeric(format!("particle {i}")).with_time(t + h));
        }
    }
    Ok(ParticleCloud {
        positions: x,
        time: t1,
        seed: cloud.seed,
    })
}

fn noise(rngs: &mut [ChaCha8Rng], n: usize, k: usize) -> Array2<f64> {
    let mut xi = Array2::zeros((n, k));
    for (b, rng) in rngs.iter_mut().enumerate() {
        let end = ((b + 1) * BLOCK).min(n);
        for i in b * BLOCK..end {
            for j in 0..k {
                xi[[i, j]] = rng.sample(StandardNormal);
            }
        }
    }
    xi
}
