//! One end-to-end training run: data, model, optional backbone pretraining,
//! adaptation, and the files it leaves behind.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::harness::checkpoint::save_checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::data::make_dataset;
use crate::model::MiLoraModel;
use crate::training::{evaluate, format_train_log, pretrain_backbone, train_loop, DatasetSplit, EvalMetrics, TrainOutcome};

pub const CHECKPOINT_FILE: &str = "checkpoint.milora";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.txt";

pub struct RunArtifacts {
    pub model: MiLoraModel,
    pub data: DatasetSplit,
    pub outcome: TrainOutcome,
    /// Dev metrics of the restored best parameters.
    pub dev: EvalMetrics,
    pub pretrain_loss: Option<f64>,
}

pub fn dataset(cfg: &RunConfig) -> Result<DatasetSplit> {
    make_dataset(&cfg.task_spec()?, cfg.n_samples, cfg.seed)
}

/// Model with its backbone pretrained as configured, before adaptation.
pub fn prepare_model(cfg: &RunConfig, data: &DatasetSplit) -> Result<(MiLoraModel, Option<f64>)> {
    let mut model = MiLoraModel::new(cfg.model.clone(), cfg.seed)?;
    let p = &cfg.pretrain;
    let loss = if p.steps > 0 {
        Some(pretrain_backbone(&mut model, &data.train, p.steps, p.lr, p.batch_size, cfg.seed)?)
    } else {
        None
    };
    Ok((model, loss))
}

pub fn run_training(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let data = dataset(cfg)?;
    let (mut model, pretrain_loss) = prepare_model(cfg, &data)?;
    let outcome = train_loop(&mut model, &data, &cfg.train_config())?;
    let dev = evaluate(&model, &data.dev)?;
    Ok(RunArtifacts {
        model,
        data,
        outcome,
        dev,
        pretrain_loss,
    })
}

pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub config: PathBuf,
}

pub fn write_run(dir: &Path, cfg: &RunConfig, run: &RunArtifacts) -> Result<RunFiles> {
    std::fs::create_dir_all(dir)?;
    let files = RunFiles {
        checkpoint: dir.join(CHECKPOINT_FILE),
        log: dir.join(LOG_FILE),
        config: dir.join(CONFIG_FILE),
    };
    save_checkpoint(&files.checkpoint, cfg, &run.model)?;
    std::fs::write(&files.log, format_train_log(&run.outcome.log))?;
    std::fs::write(&files.config, cfg.to_text())?;
    Ok(files)
}
