//! Residual-recursion autoencoders (RRAE) and everything needed to train and
//! evaluate them on binary shape-illustration images and MNIST.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: `f64` tensors with reverse-mode differentiation.
//! * [`losses`] and [`msssim`]: training objectives and image metrics.
//! * [`models`]: fully-connected (conditional) VAEs and convolutional AEs.
//! * [`rrae`]: the residual-recursion trial loop and training step.
//! * [`sii`]: the Savonius-rotor image dataset generator.
//! * [`dct`]: the DCT + zigzag compression baseline.
//! * [`data`], [`optim`], [`experiment`]: loaders, Adam, and experiment runs.

pub mod checkpoint;
pub mod data;
pub mod dct;
pub mod error;
pub mod experiment;
pub mod imageio;
pub mod losses;
pub mod models;
pub mod msssim;
pub mod optim;
pub mod rrae;
pub mod sii;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Tape, Tensor, Var};
