//! Encoder-decoder variants, their parameters, and the training loss.

mod config;
mod forward;
mod params;

pub use config::{parse_key_values, LossScope, ModelConfig, Variant};
pub use forward::{
    decode, decoder_stack, embed_block, encode, eval_logits, eval_loss, forward_loss, loss,
    loss_and_grads, loss_from_hidden, loss_targets, positional_encoding, project,
    self_attention_maps, BlockOutput, Bound, DecoderOutput, EncoderOutput, RunOptions,
};
pub use params::{init_tensor, param_shapes, ModelParams, CONTEXT_BLOCKS};

#[cfg(test)]
mod tests;
