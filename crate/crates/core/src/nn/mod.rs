//! Minimal differentiable numerical core: dense layers, layer norm,
//! embeddings, masked multi-head attention, AdamW, a finite-difference
//! gradient checker and the parameter checkpoint format.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use attention::{
    forward_attention_block, AttentionMask, AttentionPattern, Segment, TransformerBlock,
};
pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradient, DifferentiableOp, FnOp, GradCase, RegisteredOp};
pub use layers::{Embedding, LayerNorm, Linear};
pub use optim::{optimizer_step, step_model, AdamWConfig, OptimizerState};
pub use scalar::Scalar;
pub use tensor::{Param, Parameters, Tensor};
