//! Likelihood and unlikelihood objectives, Adam, and the training loop.
//!
//! A step sums `L1 = nll_d1 + α·nll_d2` on dialogue data and
//! `L2 = β·ul_pos + (1−β)·ul_neg` on entailed and contradicted inference
//! pairs, then takes one Adam step on the sum. Every term is a mean over
//! scored tokens.

mod adam;
mod loss;
mod train;

pub use adam::{Adam, AdamConfig};
pub use loss::{
    dialogue_forward, masked_lm_term, nll_d1, nll_d2, token_mean, ul_negative, ul_negative_term, ul_positive,
    ul_positive_term, unlikelihood_logits, DialogueTerms, LossBreakdown, MaskedBatch, UL_CEILING,
};
pub use train::{
    batch_indices, loss_gradients, step_batch, training_step, RngState, StepBatch, TrainConfig, TrainData, Trainer,
};
