//! Diffusion-augmented audio-video masked autoencoder pre-training at desk
//! scale, with an analytic FLOPS cost model for the full-scale workload.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod flops;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod patch;
pub mod rng;
pub mod schedule;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use tensor::{Tape, Tensor, TensorError, Var};
