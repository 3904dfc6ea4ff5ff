//! The co-training loop, run directories, checkpoints and ablation sweeps.

mod ablation;
mod checkpoint;
mod config;
mod run;
mod step;

pub use ablation::{
    datasets_for, median, plan_ablation, run_ablation, AblationGrid, AblationRow, AblationTable, AblationVariant,
    PlannedRun,
};
pub use checkpoint::{BestMetric, CheckpointRecord, CHECKPOINT_VERSION};
pub use config::{poly_lr, Seeds, TrainConfig};
pub use run::{
    checkpoint_path, evaluate_nets, evaluate_samples, resume, train, FinalReport, RunOutcome, LOSS_HEADER,
    METRIC_HEADER,
};
pub use step::{train_step, StepAudit, StepOutcome, TargetTag, TrainState};
