//! Dense `f64` tensors with a small reverse-mode tape.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{
    AttentionLayout, AttentionSegment, AttentionWeights, CustomOp, Gradients, Graph, Var, MASK_LOGIT,
};
pub use optim::{step_lr, AdamW};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub(crate) use graph::softmax_in_place;
