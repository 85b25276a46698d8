//! Joint contrastive and language-modeling optimization.

mod config;
mod loss;
mod optim;
mod queue;
#[cfg(test)]
mod tests;
mod trainer;

pub use config::TrainConfig;
pub use loss::{contrastive_loss, lm_loss, teacher_forcing, total_loss, ContrastiveInputs};
pub use optim::{clip_global_norm, lr_at, momentum_update, soft_label_weight, AdamW};
pub use queue::NegativeQueue;
pub use trainer::{StepReport, Trainer};
