//! Joint super-resolution and chromatic mapping for 4x4 snapshot mosaic
//! multispectral sensors.
//!
//! The crate bundles everything needed to train and evaluate the
//! texture-sensitive residual channel attention models on mosaic sensor
//! data at desk scale:
//!
//! - [`tensor`]: dense `f32` arrays with reverse-mode autodiff over the
//!   operation set the models need, plus finite-difference gradient
//!   verification;
//! - [`mosaic`]: the 4x4/16-band filter-array geometry and both input
//!   formations (zero-padded and compact);
//! - [`chroma`]: bicubic upsampling, colour-matching-function mapping,
//!   and the conventional baseline built from them;
//! - [`metrics`]: PSNR / SSIM / per-channel spectral information
//!   divergence, plus flow-consistency occlusion masks;
//! - [`model`]: the residual channel attention network and its
//!   texture-sensitive extension;
//! - [`data`]: deterministic synthetic scene generation, dataset splits,
//!   and training augmentation;
//! - [`train`]: Adam, the step-halving schedule, and the fit loop;
//! - [`io`]: the portable tensor file format plus PGM/PPM image I/O.

pub mod chroma;
pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod mosaic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
