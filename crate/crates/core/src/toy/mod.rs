//! Desk-scale teacher/student harness for checking module transfer end to end.
//!
//! A teacher is trained with PEFT modules on a synthetic task, its modules are
//! moved into a shallower (and possibly narrower) student, and the student is
//! then trained from that initialization and, separately, from a fresh one
//! with identical data order.

mod config;
mod experiment;
mod model;
mod task;
mod train;

pub use config::{CaptureMode, ExperimentConfig, Mode};
pub use experiment::{
    build_pair, capture_samples, run_experiment, run_seed, seed_for, task_for, train_options_for, transfer_head,
    transferred_student, ExperimentReport, ExperimentSummary, Role, RunMetrics, SeedResult, StrategySummary, TransferResult,
};
pub use model::{Attention, Block, Gradients, Head, ModelSpec, Peft, ToyModel};
pub use task::{Dataset, TaskKind, TaskSpec, ToyTask};
pub use train::{epoch_order, train_peft, EpochLog, TrainOptions, TrainingLog};
