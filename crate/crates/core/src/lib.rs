//! Discrete-diffusion generative recommendation: semantic-ID tokenization,
//! a bidirectional mask predictor, and iterative beam decoding.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};

/// Every differentiable operation of the crate with its instance generator.
pub fn gradient_suite() -> Vec<nn::gradcheck::RegisteredOp> {
    let mut ops = nn::gradcheck::ops();
    ops.extend(tokenizer::grad_ops());
    ops.extend(predictor::grad_ops());
    ops
}
