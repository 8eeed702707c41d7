//! FasterFC spectral convolution blocks and the accelerated MRI
//! reconstruction stack built on them: U-Net variants, an unrolled
//! variational network, the FAS-Net k-space and split-slice stages, a
//! synthetic multi-coil data simulator and image quality metrics.

pub mod array;
pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod container;
pub mod error;
pub mod fasnet;
pub mod fft;
pub mod kspace;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod simdata;
pub mod unet;
pub mod varnet;
pub mod volume;

pub use array::{CArray, NdArray, Tensor};
pub use autodiff::{gradcheck, ConvCfg, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Rule};
