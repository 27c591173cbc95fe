//! Run configuration, datasets, checkpoints, reports and ablations.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod reports;
pub mod run;

pub use ablation::{ablation_base, run_ablation, AblationTable, Preset};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{RunConfig, OUT_DIR_ENV};
pub use data::{make_dataset, parse_tokens, TaskSpec};
pub use reports::{expert_distribution, route_dump, route_prompt, ExpertDistribution};
pub use run::{run_training, write_run, RunArtifacts};
