//! Critical-representation fine-tuning at desk scale: a small decoder-only
//! transformer with full trace capture, information-flow identification of
//! intervention positions, low-rank subspace edits trained with the base
//! frozen, and the synthetic reasoning tasks plus experiments that validate
//! the mechanism.

pub mod checkpoint;
pub mod error;
pub mod infoflow;
pub mod intervention;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use infoflow::{
    attention_grid, identify, multi_referential_filter, perturbation_oracle, saliency_grid,
    self_referential_filter, select_positions, union_filter, ChainMode, CriticalSet, Criteria,
    CrftConfig, GridKind, InfoGrid, Segment, SegmentMap, Strategy,
};
pub use intervention::{orthonormalize, param_count, InterventionParams, LowRankEdit};
pub use model::{
    EditMap, ForwardOpts, ForwardTrace, LayerEditSpec, MicroTransformer, Mode, ModelConfig,
};
pub use tasks::{
    ablation_suite, evaluate, gen_chain_arith, gen_few_shot, load_dataset, noise_experiment,
    save_dataset, split3, AblationAxis, AblationRow, EvalReport, RetentionCurve, TaskSample,
};
pub use tensor::{GradMap, Tape, Tensor, TensorId};
pub use train::{
    lr_at, pretrain_base, train_crft, AdamW, PretrainConfig, PretrainOutcome, RunHistory,
    TrainConfig,
};
