//! Stereo endoscopic image super-resolution with combined channel and spatial
//! attention and parallax attention.
//!
//! This crate is `no_std` (it needs `alloc`) and carries everything that is
//! pure computation: the differentiable tensor tape, the network blocks, the
//! parallax attention module, the model, losses, metrics, the bicubic
//! degradation and synthetic stereo generator, and the checkpoint byte codec.
//! File IO and the command line live in the `ccsbesr` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adam;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod metrics;
pub mod pam;
pub mod model;
pub mod params;
pub mod real;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use error::{CheckpointError, Error, Result};
pub use params::{Bound, ParamId, ParamInit, ParamStore};
pub use real::{DType, Real};
pub use tape::{PoolMode, Tape, Var};
pub use tensor::{pixel_unshuffle, Tensor};
