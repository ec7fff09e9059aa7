//! DSelect-k: a continuously differentiable, sparse gate for mixture-of-experts,
//! plus everything needed to train and evaluate it at desk scale.
//!
//! The crate is organized along the moving parts of a gated MoE:
//!
//! * [`tensor`] / [`graph`] — dense `f64` tensors and a small reverse-mode
//!   autodiff engine with exactly the primitives the gates need.
//! * [`gate`] — the DSelect-k math itself: smooth-step, binary-encoded single
//!   expert selectors, static and per-example gates, entropy regularizers,
//!   and the sparse-weights-to-parameters constructor.
//! * [`baseline`] — softmax, Top-k, Gumbel-sigmoid and softmax-selector
//!   ablation gates used for comparisons.
//! * [`model`] — experts, towers, multi-gate multi-task MoE assembly, the
//!   shared-bottom baseline, and the frozen-expert recovery model.
//! * [`optim`] — SGD/Adam/Adagrad, annealing schedules, early stopping.
//! * [`synth`] — deterministic synthetic dataset generators.
//! * [`metrics`] — Jaccard statistics, expert-support extraction, binary
//!   convergence tracking, and predictive metrics.

pub mod baseline;
pub mod gate;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod io;
pub mod optim;
pub mod synth;
pub mod tensor;

pub use graph::{Bindings, EvalTrace, ExprGraph, GraphError, NodeId, ParamStore};
pub use tensor::{Tensor, TensorError};
