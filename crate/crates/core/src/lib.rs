//! 1-bit convolution kernels and a sparse binarized video-matting network.

pub mod bench;
pub mod backend;
pub mod binarize;
pub mod bits;
pub mod cli;
pub mod ebb;
pub mod error;
pub mod frames;
pub mod info;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod shb;
pub mod synth;
pub mod tape;
pub mod train;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{BinaryMap, DenseTensor, Shape};
