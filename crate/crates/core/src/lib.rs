//! WaveFormer: a 3D segmentation transformer that runs self-attention on the
//! low-frequency wavelet approximation of its feature maps and decodes through
//! inverse wavelet transforms.
//!
//! The crate is framework-free: it ships its own dense tensor type, the forward
//! numeric kernels (convolution, normalization, attention, wavelet transforms),
//! a tape-based reverse-mode autodiff engine, an AdamW training loop on
//! synthetic volumetric data, and the evaluation metrics (Dice, HD95).

pub mod attention;
pub mod autodiff;
pub mod conv;
pub mod error;
pub mod metrics;
pub mod model;
pub mod prng;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use autodiff::{Tape, Var};
pub use error::{CoreError, Result};
pub use model::{ModelConfig, ParamStore, Variant};
pub use prng::Prng;
pub use tensor::{Scalar, Tensor};
