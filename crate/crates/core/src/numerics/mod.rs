//! Dense tensors, a reverse-mode tape, neural primitives and Adam.

pub mod adam;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use nn::{batched_attention, layer_norm, linear, multi_head_attention, sage_conv, AttentionProj, SageWeights};
pub use params::{Bound, ModelParameters, ParamStore};
pub use tape::{Grads, Tape, Var, MASKED};
pub use tensor::Tensor;
