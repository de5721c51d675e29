//! Training harness: data splits, optimizer, schedules, checkpoints and the
//! pre-training, probing, change-detection and sweep drivers.

pub mod change;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;
pub mod plot;
pub mod pretrain;
pub mod probe;
pub mod schedule;
pub mod sweep;
