//! Shared fixtures for the criterion benches.

use fpflow::networks::{CouplingFlow, FlowConfig, GaussianDensity, LogDensityModel, LogDensityTfp, PotentialConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` points uniform in `[-2, 2]^d`.
pub fn points(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0))
}

/// Potential model with the default architecture and a standard normal start.
pub fn potential_model(d: usize, seed: u64) -> LogDensityTfp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LogDensityTfp::new(GaussianDensity::standard(d), PotentialConfig::default(), &mut rng).expect("valid model")
}

/// Coupling flow with randomized parameters so that no layer is the identity.
pub fn coupling_flow(d: usize, seed: u64) -> CouplingFlow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flow = CouplingFlow::new(d, FlowConfig::default(), &mut rng).expect("valid flow");
    for v in flow.params_mut().iter_mut() {
        v.value.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
    }
    flow
}
