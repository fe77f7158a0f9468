//! Minimal differentiable building blocks and a gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod param;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ScalarFunction};
pub use graph::{accumulate_into, Graph, NodeId};
pub use ops::{attention, avgpool_global, conv2d, gelu, linear, masked_lm_loss, mlp2, sdp_attention, softmax};
pub use param::{ParamGroup, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
