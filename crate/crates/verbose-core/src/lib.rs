//! Energy-latency attack kernel for autoregressive multimodal captioners.
//!
//! The crate crafts *verbose samples*: images or videos carrying an
//! imperceptible L∞-bounded perturbation that drives a captioning model to
//! generate abnormally long output sequences, inflating inference latency
//! and energy. Everything here is pure computation over `f64` buffers — IO,
//! timing, and file formats live in the companion `verbose-lab` crate.
//!
//! Module map:
//! - [`numerics`] — dense matrix kernel: softmax, entropy, KL divergence,
//!   SVD, nuclear norm with subgradient, finite-difference gradient oracle.
//! - [`tape`] — reverse-mode automatic differentiation over matrices.
//! - [`victim`] — the differentiable toy captioner (image and video), its
//!   trainer, and the shape-world synthetic corpus.
//! - [`objectives`] — the attack losses (delayed EOS, uncertainty, token /
//!   frame diversity) plus sponge- and slowdown-style baselines.
//! - [`optimizer`] — sign-gradient PGD with L∞ projection and the temporal
//!   weight-adjustment schedule.
//!
//! The crate is `no_std`-compatible (with `alloc`); the default `std`
//! feature simply switches float transcendentals to the platform libm.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod math;
pub mod numerics;
pub mod objectives;
pub mod optimizer;
pub mod tape;
pub mod victim;
