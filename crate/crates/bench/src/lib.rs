//! Shared fixtures for the criterion benchmarks.

use qnoise_core::autodiff::MlpConfig;
use qnoise_core::datasets::ToyTarget;
use qnoise_core::quantile::{ProductQuantile, RqsConfig};
use qnoise_core::training::{Latent, Noise, TrainConfig, TrainState};
use qnoise_core::Rng;

pub use ndarray::Array2;

pub fn gmm_batch(n: usize, seed: u64) -> Array2<f64> {
    ToyTarget::GridGmm.sample_batch(n, &mut Rng::new(seed))
}

pub fn gauss_batch(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = Rng::new(seed);
    Array2::from_shape_simple_fn((n, 2), || rng.gauss())
}

pub fn uniforms(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = Rng::new(seed);
    Array2::from_shape_simple_fn((n, 2), || 0.001 + 0.998 * rng.uniform())
}

/// A learned-latent training state on the grid GMM.
pub fn gmm_state(hidden: Vec<usize>) -> TrainState {
    let latent = Latent::Learned { quantile: ProductQuantile::new(2, RqsConfig::default()).expect("default spline") };
    TrainState::new(TrainConfig::default(), MlpConfig::velocity(2, hidden, 64), Noise::Quantile(latent), 0)
        .expect("valid fixture")
}
