//! Tensor kernels, reverse-mode autodiff, Adam, and gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, ParamReport};
pub use graph::{ndp_value, top_k_indices, BatchNormConfig, Graph, Mode, RunningStats, Var};
pub use optim::{adam_step, AdamState};
