//! Focal+dice objective, AdamW and the early-stopping pre-training loop.

mod adamw;
mod loss;
mod pretrain;

pub use adamw::{AdamWConfig, AdamWState};
pub use loss::{combined_loss, combined_loss_value, dice_loss, focal_loss, LossConfig, PROB_CLAMP};
pub use pretrain::{
    constant_prediction_loss, dataset_loss, pretrain, EarlyStopConfig, EarlyStopState, EpochRecord,
    History, PretrainConfig, StopDecision,
};
