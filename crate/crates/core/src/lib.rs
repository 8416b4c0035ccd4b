//! Segmentation with bucketed learnable-similarity attention.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`autodiff`]: dense tensors and a reverse-mode tape.
//! - [`slh`]: super-bit LSH bucketing of token vectors.
//! - [`glam`]: attention restricted to hash buckets.
//! - [`models`]: the GTNet generator and the conditional discriminator.
//! - [`losses`] / [`metrics`]: training objectives and evaluation.
//! - [`train`] / [`infer`]: adversarial training and sliding-window inference.
//! - [`config`], [`checkpoint`], [`dataset`], [`bench`]: I/O and tooling.

pub mod augment;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod glam;
pub mod gradcheck;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod slh;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
