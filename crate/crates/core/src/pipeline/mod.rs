//! Pre-training, fine-tuning, evaluation and ablation sweeps.

mod ablate;
mod config;
mod data;
mod run;

pub use ablate::{ablate, save_ablation_csv, write_ablation_csv, AblationRow, Cell, Sweep};
pub use config::{
    DataConfig, EvalConfig, ExperimentConfig, FinetuneConfig, InitMode, LabelMode, PretrainConfig, SamplingSpec,
};
pub use data::{fit_normalizer, load_manifest, prepare, targets, Normalizer, Prepared};
pub use run::{argmax_classes, evaluate, finetune, label_proportions, pretrain, CheckpointMeta, FinetuneStart, RunReport};
