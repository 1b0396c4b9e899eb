//! Deterministic tensor arithmetic with reverse-mode gradients, the Adam
//! optimizer with warmup/invsqrt schedule, Gumbel-Softmax sampling, a seeded
//! splittable random stream, and a finite-difference gradient checker.
//!
//! Training arithmetic runs in `f32`; verification (gradient checking) runs
//! the same generic code in `f64`, where central differences are meaningful.

mod gradcheck;
mod graph;
mod gumbel;
mod optim;
mod real;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, rel_err};
pub use graph::{AssembleSpec, AttentionPlan, Graph, SegmentAttention, Var, LATENT_SLOT};
pub use gumbel::{gumbel_noise, gumbel_softmax_sample, gumbel_weights};
pub use optim::{adam_step, lr_schedule, AdamHyper, OptimizerState};
pub use real::{naive_gemm, Real};
pub use rng::RngStream;
pub use tensor::TensorValue;
