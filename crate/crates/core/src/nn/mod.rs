//! Dense tensors, a recorded graph with reverse-mode gradients, recurrent and
//! attention layers, Gaussian mixtures and Adam.

mod adam;
mod checkpoint;
mod gmm;
mod gradcheck;
mod graph;
mod layers;
mod tensor;

#[cfg(test)]
mod tests;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use gmm::{gmm_log_prob, log_sum_exp, softmax, Gaussian2, GaussianMixture2D};
pub use gradcheck::{grad_check, rel_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{blend, AdditiveAttention, BiLstm, Dense, GruCell, LstmCell, Mlp, ParamId, ParamSet};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
