//! Losses, optimizer, schedule, checkpoints and the stage driver.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod optim;
pub mod stage;

pub use checkpoint::{average_checkpoints, average_params, Checkpoint, DType};
pub use config::{desk_model, Stage, StageConfigFile, TrainConfig};
pub use loss::{chunk_weights, masked_mse_loss, smoothed_ce_loss};
pub use optim::{adam_step, lr_at, AdamConfig, AdamState};
pub use stage::{
    evaluate, mask_seed, run_stage, stage_init_params, EvalRecord, Example, LossRecord, StageArtifacts, StageInit,
    StageOutcome,
};
