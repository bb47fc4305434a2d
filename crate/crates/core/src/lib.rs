//! Multi-task paired masking with alignment (MPMA) for vision-language
//! pre-training, at desk scale.
//!
//! Three pre-training branches share one vision encoder:
//!
//! * masked image reconstruction (patch masking + pixel MSE),
//! * masked report reconstruction through memory-augmented cross-modal fusion,
//! * global and local contrastive alignment of images and reports.
//!
//! Everything runs on the in-crate reverse-mode autodiff in [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod kv;
pub mod masking;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod real;
pub mod rng;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
