//! A small pre-norm Transformer encoder-decoder trained from scratch in `f64`.
//!
//! Each layer applies layer norm before its sublayer and adds the result back
//! to the residual stream; the encoder and decoder each end with a final
//! norm. Token embeddings are scaled by `sqrt(d_model)` and summed with
//! sinusoidal position encodings. The output projection is a separate
//! tensor, so source and target embeddings share one table but logits do not.

mod checkpoint;
mod decode;
mod forward;
pub(crate) mod graph;
mod params;
pub mod tensor;
mod train;
mod vocab;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use decode::{translate, DecodeMode, DecodeOptions, Translation};
pub use forward::{
    forward_logits, forward_loss, loss_gradients, positional_encoding, Batch, BOS_ID, EOS_ID, NUM_SPECIAL, PAD_ID, UNK_ID,
};
pub use params::{init_params, init_tensor, ModelParams, TransformerConfig};
pub use tensor::Matrix;
pub use train::{corpus_loss, train, train_step, OptimConfig, Pair, StepOutcome, TrainState, TrainingLog, TrainingSchedule};
pub use vocab::{Vocab, SPECIAL_TOKENS};

#[cfg(test)]
use forward::loss_and_grads;
