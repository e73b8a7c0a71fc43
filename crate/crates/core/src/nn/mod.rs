//! Minimal dense tensor core: reverse-mode autodiff, layer primitives,
//! AdamW and a finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;


pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{AttnMask, Gradients, Graph, Var};
pub use optim::{AdamWConfig, CosineSchedule, OptimizerState};
pub use params::{Param, ParamId, ParamStore, Partition};
pub use tensor::{Float, Tensor};
