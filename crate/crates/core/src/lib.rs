//! Gated HiPPO state-space side-cars bolted onto a frozen byte-level
//! transformer, plus the numerics needed to trust a training run: corrected
//! loss functions, finite-difference gradient verification, adapted-vs-base
//! divergence evaluation, gate-initialization audits, and an ordered
//! validate-before-extend pipeline.
//!
//! The crate is `no_std` + `alloc`; everything is `f64` and deterministic
//! given a seed. File formats and the CLI live in the companion `sidecar-cli`
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod eval;
pub mod hippo;
pub mod ics;
pub mod linalg;
pub mod model;
pub mod train;

mod backprop;
mod math;

pub use eval::{
    budget_gate, divergence_eval, gate_audit, run_validation_gate, BudgetReport, CheckKind,
    CheckResult, DivergenceReport, EvalError, GatePolicy, GateViolation, ProbeSet, ValidationArgs,
    ValidationReport,
};
pub use hippo::{discretize_bilinear, hippo_matrix, HippoError, HippoVariant, SsmCore, SsmState};
pub use ics::{
    ics_score, validate_suite, Category, IcsError, IcsResult, ScoredResponse, SuiteIssue,
};
pub use linalg::{
    lower_triangular_eigenvalues, matmul, seeded_gaussian, solve_linear, LinalgError, Matrix,
    SeededRng, Vector,
};
pub use model::{
    apply_gate_blend, HybridModel, LoraTarget, ModelConfig, ModelError, ParamId, TrainableMask,
};
pub use train::{
    copy_task_batches, cross_entropy, grad_check, grad_check_with_fault, kl_divergence,
    sequence_lm_loss, train, Distribution, GradCheckReport, LossError, TrainBatch, TrainError,
    TrainReport,
};
