//! Toy conditional attention denoiser: noise schedule, model, training,
//! checkpointing.

mod checkpoint;
mod model;
mod schedule;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{
    forward, forward_inference, patchify_map, unpatchify_map, AttentionRecord, BoundParams,
    DenoiserConfig, DenoiserParams,
};
pub use schedule::{
    q_sample, q_sample_seeded, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T,
};
pub use train::{train, train_with, TrainConfig};
