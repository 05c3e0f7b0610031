//! Adam with warm-up and cosine decay, the training and evaluation loops,
//! and the ablation harness.

pub mod ablate;
pub mod config;
pub mod optim;
pub mod run;

pub use ablate::{ablate, ablation_variants, AblationAxis, AblationRow, AblationTable, Variant, COMPONENT_GRID};
pub use config::{AdamConfig, ArchConfig, Toggles, TrainConfig};
pub use optim::{adam_step, lr_schedule, AdamState};
pub use run::{
    describe_epoch, evaluate_with, split_hash, train, train_with, ClipPipeline, EpochRecord, EvalReport,
    EvalSummary, RunRecord, Sample, Trainer, TrainerMeta, VideoScore, ABORT_DIR, CHECKPOINT_DIR, LOSS_LOG,
    META_FILE, RUN_RECORD, TRAIN_CONFIG_FILE,
};
