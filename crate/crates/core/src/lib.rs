//! Knowledge distillation in which the student's features are denoised by a
//! small diffusion model trained on the teacher's features before being
//! compared with them.
//!
//! The pieces, bottom up:
//!
//! - [`schedule`]: linear β schedule, forward noising, deterministic DDIM steps.
//! - [`denoiser`]: bottleneck noise predictor for spatial and vector latents.
//! - [`adapters`]: linear autoencoder, student projection, adaptive noise matching (γ).
//! - [`distance`]: MSE, temperature KL and a correlation-based distance.
//! - [`diffkd`]: per-head losses and the full objective
//!   `task + λ_diff·diff + λ_ae·ae + λ_kd·kd`.
//! - [`train`], [`data`], [`models`], [`checkpoint`], [`metrics`]: the CPU
//!   training harness around small CIFAR-style ResNets.
//! - [`ablation`], [`viz`], [`cli`]: sweeps, attention maps, γ figures and the
//!   `diffkd` binary.
//!
//! Each capability has a runnable example under `examples/`:
//! `noise_schedule`, `denoiser`, `feature_adapters`, `distances`,
//! `diffkd_step`, `train_synthetic`, `nfe_ablation`, `ae_dim_ablation`,
//! `attention_map` and `gamma_stats`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod adapters;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffkd;
pub mod distance;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod random;
pub mod schedule;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
