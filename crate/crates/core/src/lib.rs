//! Decoder-free world-model reinforcement learning with next-embedding
//! prediction.
//!
//! The crate is organised bottom-up: a small reverse-mode autodiff engine
//! ([`autodiff`]) over rayon-parallel kernels ([`kernels`], [`par`]), layer
//! blocks ([`nn`]), and on top of those the environments, replay buffer,
//! RSSM world model, next-embedding predictor, imagination actor-critic,
//! training loop, and diagnostics.

pub mod autodiff;
pub mod behavior;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod kernels;
pub mod nepredictor;
pub mod nn;
pub mod optim;
pub mod par;
pub mod params;
pub mod replay;
pub mod tensor;
pub mod trainer;
pub mod worldmodel;
pub mod twohot;

pub use autodiff::{Gradients, Tape, Var};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::Tensor;
pub use error::{Error, Result};
