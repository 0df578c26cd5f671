pub mod ablate;
pub mod alloc_tuning;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod encoder;
pub mod error;
pub mod geom;
pub mod head;
pub mod image;
pub mod kernel;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod patch;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod track;
pub mod train;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) fn track_window_for_tests(n: usize) -> Tensor {
    track::hanning2d(n)
}
