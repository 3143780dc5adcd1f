//! Fixed inputs shared by the benchmarks.

use pfedes_core::config::ExperimentConfig;
use pfedes_core::protocol::TrainingSetup;
use pfedes_core::Tensor;

/// Deterministic pseudo-random fill in [-1, 1).
pub fn filled(shape: &[usize], salt: u64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| {
        let h = (i as u64 ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 11;
        h as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

/// One pfedes client at desk scale: 3x32x32 synthetic images, default
/// hyperparameters.
pub fn desk_setup(variant: u8) -> TrainingSetup {
    ExperimentConfig::parse(&format!(
        "mode = pfedes\ndataset = synthetic\nsynthetic_shape = 3x32x32\nsynthetic_per_class = 40\n\
         num_clients = 2\nrounds = 1\nvariants = {variant}\nseed = 1\n"
    ))
    .and_then(|c| c.training_setup())
    .expect("benchmark config is valid")
}
