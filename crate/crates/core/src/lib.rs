//! Privileged-information training for pose regression.
//!
//! A teacher network sees a clean, privileged modality during training; its
//! mid-level activations supervise a student network that only sees the hard
//! modality. This crate holds everything that is pure computation: the
//! reverse-mode autodiff engine, network construction, the loss terms, a
//! synthetic paired-modality generator, keypoint metrics and the per-iteration
//! training steps. File formats, the experiment runner and the CLI live in the
//! `lupi` crate.
//!
//! The crate is `no_std` and only needs `alloc`. Enable the `std` feature to
//! let the matrix kernels pick SIMD paths at runtime.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

mod gemm;

pub use autograd::{ConvPath, Graph, Var};
pub use error::{Error, Result};
pub use losses::LossWeights;

pub use metrics::Metrics;
pub use model::{ActivationTap, Layer, Network, NetworkSpec};
pub use optim::Sgd;
pub use synth::{Sample, SkeletonConfig};

pub use tensor::Tensor;
