//! CPU deep-learning engine built around an l2-normalized spatial attention
//! block for brain-tumor MRI classification.
//!
//! The crate provides dense tensors, eager numeric kernels, a define-by-run
//! autodiff tape, two spatial attention blocks, convolutional model builders,
//! a binary checkpoint format, dataset loading/splitting, and an Adam
//! training loop. Everything runs single-threaded on the CPU with seeded
//! RNGs so identical configurations reproduce identical artifacts.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, ElemWidth, PadMode, Scalar, Tensor};
