//! Training machinery: optimizer, schedule, data, checkpoints, and the
//! train/evaluate loops.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;
pub mod schedule;
mod trainer;

pub use checkpoint::{Checkpoint, Record, RecordData};
pub use config::TrainConfig;
pub use data::{load_dataset, DataFormat, DataSource, Dataset};
pub use optim::{AdamW, OptimizerState};
pub use schedule::{drop_path_rates, lr_at, LrSchedule};
pub use trainer::{evaluate, evaluate_checkpoint, model_checkpoint, store_bytes, train, StepStats, TrainReport, Trainer};
