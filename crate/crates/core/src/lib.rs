//! Periodic subspace exploration and exploitation for low-rank training of a
//! single weight matrix, with the numerical kernels, drivers and an
//! experiment harness.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod linalg;
pub mod optim;
pub mod peso;
pub mod problems;
pub mod subspace;

pub use error::{Error, Result};
pub use harness::trace::{trace_summary, ConvergenceSummary, RunTrace, TraceRecord, TRACE_HEADER};
pub use linalg::{
    orthogonal_procrustes, polar_refactor, qr_thin, rms_norm, svd_full, svd_top_r, Matrix, Tolerances,
};
pub use optim::{
    adamw_step, align_states_after_restart, beta2_at, sgd_step, AdamHyper, AdamState, Beta2Warmup, LrSchedule,
};
pub use peso::{
    run_galore_baseline, run_lora_baseline, run_peso_generic, run_peso_lora_r, run_peso_lora_t, PesoConfig,
    RunResult,
};
pub use problems::{mlp_objective, noisy_grad, quadratic_objective, MlpConfig, NoiseModel, Objective};
pub use subspace::{
    absorb, galore_step, restart_adapters_from_gradient, smooth_restart, AdapterPair, AnchoredState,
    SmoothingConfig,
};
