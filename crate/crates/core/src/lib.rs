//! Drum-hit classification with a light-weight parallel-convolution CNN.
//!
//! * [`audio`]: WAV I/O, STFT and the 128-band Mel power spectrogram.
//! * [`tensor`]: tensors, convolution kernels and reverse-mode autograd.
//! * [`net`]: the network, its analytic FLOP/parameter accounting and
//!   checkpoints.
//! * [`train`]: datasets, a synthetic drum kit, SGD training and evaluation.
//! * [`fog`]: a seeded cloud-vs-fog inference placement simulator.

pub mod audio;
pub mod error;
pub mod fog;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use net::{Model, NetworkSpec};
pub use tensor::{ConvKind, ConvLayerSpec, Tensor};
