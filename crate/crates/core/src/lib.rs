//! Doubly-stochastic attention with finite Sinkhorn budgets, compiled into
//! non-iterative operators.
//!
//! A frozen attention layer that balances its plan with S Sinkhorn steps
//! repeats the same scaling loop on every forward call. This crate runs that
//! finite-budget teacher, extracts its closure-ready source dual, fits the
//! dual as a linear combination of exact one-dimensional sliced transport
//! potentials (closed-form ridge or convex KL), and replaces the loop at
//! inference with one dual prediction plus one to three entropic
//! c-transforms. The harness measures how far each cheap operator stays
//! from the teacher and how much latency the replacement saves.
//!
//! Module map:
//! * [`numerics`] — log-sum-exp, centering, sphere sampling, SPD solves.
//! * [`sinkhorn`] — kernels, the finite-budget teacher, the matrix-scaling
//!   baseline.
//! * [`sliced`] — 1D sliced potentials and the token-level feature matrix.
//! * [`ctransform`] — entropic c-transforms and plan reconstruction.
//! * [`calibration`] — ridge / KL fits and the serializable compiled layer.
//! * [`metrics`] — fidelity and marginal metrics plus brute-force oracles.
//! * [`harness`] — synthetic cases, the replacement study, latency runs.
//! * [`selftest`] — the deterministic property suite.

pub mod calibration;
pub mod ctransform;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod selftest;
pub mod sinkhorn;
pub mod sliced;

pub use calibration::{CompiledLayer, FitObjective};
pub use ctransform::ReconstructionMode;
pub use error::{Error, Result};
pub use harness::{gen_case, ExperimentConfig};
pub use sinkhorn::{AttentionCase, KernelKind, KeyMask, TeacherConfig, TransportPlan};
pub use sliced::SliceBank;
