//! Core library for a two-stage curriculum dialogue generator.
//!
//! Stage 1 trains a coarse one-to-one response generator; stage 2 warm-starts
//! two models from it: a diverse generator conditioned on a K-way discrete
//! latent (sampled with Gumbel-Softmax) and a coherence evaluator that ranks
//! candidate responses. Everything here is deterministic given a seed and
//! runs on explicitly passed state; no global allocator tricks, no threads.
//!
//! The crate is `no_std`-compatible (with `alloc`). File IO, the CLI and the
//! on-disk formats live in the companion `parley-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod training;

pub use error::{CoreError, Result};
