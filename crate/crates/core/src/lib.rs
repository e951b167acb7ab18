//! Desk-scale training framework for imbalanced ordinal classification:
//! staged transfer learning over synthetic datasets with a decoupled,
//! class-balanced classifier retraining stage, plus the metric and ablation
//! tooling to compare transfer paths.
//!
//! Everything is deterministic: given identical seeds and inputs, training
//! produces bit-identical checkpoints, datasets, and reports.

pub mod autodiff;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;

pub use autodiff::{Tape, Tensor, TensorId};
pub use data::{
    augment, load_dataset, save_dataset, stratified_split, synth_generate, AugmentOps,
    ClassDistribution, Dataset, Sample, SynthSpec,
};
pub use losses::{cbce_loss, cbce_loss_batch, ce_loss, ce_loss_batch, ce_value, ClassWeights};
pub use metrics::{ConfusionMatrix, MetricsReport, OneVsRest};
pub use model::{
    ensemble_checkpoints, grad_cam, Checkpoint, CheckpointMeta, EnsembleMode, LayerKind,
    LayerSpec, Network, NetworkSpec, SaliencyMap,
};
pub use pipeline::{
    ablate, classifier_stage, evaluate, run_plan, sgd_momentum_step, train_stage, AblationReport,
    EnsembleConfig, InitFrom, LossKind, PlanOutcome, RunRecord, StagePlan, StageSpec,
    TrainableScope, VAL_FRACTION,
};
