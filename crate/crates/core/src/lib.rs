//! Simulator for model-heterogeneous personalized federated learning in which
//! clients share only a small same-shape feature extractor.
//!
//! Each client owns a private CNN (one of five zoo variants). Per round the
//! server broadcasts the global extractor, selected clients first train their
//! CNN on original and extractor-enhanced inputs with the extractor frozen,
//! then train the extractor through the frozen CNN, and the server averages
//! the returned extractors weighted by client data volume.

pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod protocol;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{build_cnn, build_extractor, count_params, estimate_flops, init_params, ImageShape, Layer, Model, ModelSpec};
pub use ops::PaddingMode;
pub use params::{codec, sgd_step, Manifest, ParamSet};
pub use tensor::Tensor;
