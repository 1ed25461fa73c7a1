//! Continued-pretraining loop: AdamW, cosine schedule with warmup, gradient
//! accumulation and resumable checkpoints.

mod config;
mod experiment;
mod optim;
mod run;
mod schedule;

pub use config::{RunConfig, TrainConfig};
pub use experiment::{experiment_compare, ArmReport, ExperimentReport, ExperimentSetup};
pub use optim::{adamw_step, adamw_update, clip_global_norm, decays, AdamHyper, OptimizerState};
pub use run::{
    checkpoint_path, evaluate_loss, heldout_batches, read_loss_log, state_path, LogRow, Trainer, LOSS_LOG,
    GRAD_NORM_LOG, STATE_MAGIC,
};
pub use schedule::lr_at;
