//! Staged training: plans, the Adam optimizer, the per-step loop and the
//! on-disk run directory.

mod optim;
mod plan;
mod run;

pub use optim::{optimizer_step, OptimState, BETA1, BETA2, EPSILON};
pub use plan::{
    default_plans, finetune_plan, freeze_sets, Ablation, DataMode, StagePlan, DEFAULT_BATCH,
    FINETUNE_ITERATIONS, FINETUNE_LR, PUBLISHED_LR_STAGE1, PUBLISHED_LR_STAGE2,
};
pub use run::{
    init_enc_l, prepare_stage, Control, EncLInit, MetricRow, Progress, StageResult, Trainer,
    METRICS_HEADER,
};
