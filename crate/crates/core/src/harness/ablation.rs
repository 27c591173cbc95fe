//! Ablation presets. Every (cell, seed) pair is an isolated training run;
//! cells report medians over seeds and rows come out in a fixed order no
//! matter how the runs were scheduled.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::run::run_training;
use crate::model::AdapterMode;
use crate::router::{ActivationKind, GatingMode, PoolerKind, N_MOD};
use crate::training::format_train_log;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Default router against five structural variants.
    Variants,
    /// k = 1..7, plus binary k = 7 and the plain LoRA control.
    KSweep,
    LambdaSweep,
    RankSweep,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Variants, Preset::KSweep, Preset::LambdaSweep, Preset::RankSweep];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Variants => "variants",
            Preset::KSweep => "k-sweep",
            Preset::LambdaSweep => "lambda-sweep",
            Preset::RankSweep => "rank-sweep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Preset::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Desk-scale base run for ablations: a copy/reverse mix, fewer steps.
pub fn ablation_base() -> RunConfig {
    let mut cfg = RunConfig::copy_preset();
    cfg.task.kind = "mix".into();
    cfg.task.mix = vec![("copy".into(), 1.0), ("reverse".into(), 1.0)];
    cfg.train.max_steps = 400;
    cfg.train.eval_every = 100;
    cfg.n_samples = 2000;
    cfg
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub label: String,
    pub config: RunConfig,
}

pub fn cells(preset: Preset, base: &RunConfig) -> Vec<Cell> {
    let with = |label: &str, edit: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        edit(&mut config);
        Cell {
            label: label.to_string(),
            config,
        }
    };
    match preset {
        Preset::Variants => vec![
            with("milora", &|_| {}),
            with("milora-1", &|c| c.model.router.pooler = PoolerKind::Mean),
            with("milora-2", &|c| c.model.router.pooler = PoolerKind::LastToken),
            with("milora-3", &|c| c.model.router.activation = ActivationKind::Gelu),
            with("milora-4", &|c| c.model.router.activation = ActivationKind::ReluThenGelu),
            with("milora-5", &|c| c.model.router.activation = ActivationKind::GeluThenRelu),
        ],
        Preset::KSweep => {
            let mut out: Vec<Cell> = (1..=N_MOD)
                .map(|k| with(&format!("k={k}"), &|c| c.model.router.k = k))
                .collect();
            out.push(with("k=7-binary", &|c| {
                c.model.router.k = N_MOD;
                c.model.router.gating = GatingMode::Binary;
            }));
            out.push(with("lora", &|c| c.model.adapters = AdapterMode::AllExperts));
            out
        }
        Preset::LambdaSweep => [0.0, 1e-3, 1e-2, 1e-1, 1.0]
            .iter()
            .map(|&l| with(&format!("lambda={l}"), &|c| c.train.lambda_lb = l))
            .collect(),
        Preset::RankSweep => [2usize, 4, 8, 16, 32]
            .iter()
            .map(|&r| with(&format!("r={r}"), &|c| c.model.lora_rank = r))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub ppl: f64,
    pub lb: f64,
    /// Largest per-layer argmax fraction on dev.
    pub max_frequency: f64,
    pub log: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub label: String,
    pub k: usize,
    pub gating: GatingMode,
    pub adapters: AdapterMode,
    pub rank: usize,
    pub lambda_lb: f64,
    pub tunable_params: usize,
    pub seeds: Vec<SeedResult>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl CellResult {
    fn stat(&self, f: impl Fn(&SeedResult) -> f64) -> f64 {
        median(&self.seeds.iter().map(f).collect::<Vec<_>>())
    }

    pub fn accuracy_median(&self) -> f64 {
        self.stat(|s| s.accuracy)
    }

    /// Max minus min dev accuracy across seeds: the noise band of the row.
    pub fn accuracy_spread(&self) -> f64 {
        let acc: Vec<f64> = self.seeds.iter().map(|s| s.accuracy).collect();
        let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        hi - lo
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub preset: Preset,
    pub rows: Vec<CellResult>,
}

pub const ABLATION_HEADER: &str =
    "preset,variant,adapters,k,gating,rank,lambda_lb,tunable_params,seeds,accuracy_median,ppl_median,lb_median,max_frequency_median,accuracy_spread";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                self.preset.as_str(),
                r.label,
                r.adapters.as_str(),
                r.k,
                r.gating.as_str(),
                r.rank,
                r.lambda_lb,
                r.tunable_params,
                r.seeds.len(),
                r.accuracy_median(),
                r.stat(|s| s.ppl),
                r.stat(|s| s.lb),
                r.stat(|s| s.max_frequency),
                r.accuracy_spread()
            ));
        }
        out
    }

    pub fn row(&self, label: &str) -> Option<&CellResult> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Writes the table and each run's training log under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let root = dir.join(self.preset.as_str());
        std::fs::create_dir_all(&root)?;
        std::fs::write(dir.join(format!("ablation_{}.csv", self.preset.as_str())), self.to_csv())?;
        for r in &self.rows {
            for s in &r.seeds {
                std::fs::write(root.join(format!("{}_seed{}.csv", r.label, s.seed)), &s.log)?;
            }
        }
        Ok(())
    }
}

fn run_cell(cell: &Cell, seed: u64) -> Result<SeedResult> {
    let mut cfg = cell.config.clone();
    cfg.seed = seed;
    let run = run_training(&cfg).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("cell {}: {m}", cell.label)),
        other => other,
    })?;
    let max_frequency = run
        .dev
        .argmax_fraction
        .iter()
        .flat_map(|l| l.iter().copied())
        .fold(0.0, f64::max);
    Ok(SeedResult {
        seed,
        accuracy: run.dev.accuracy,
        ppl: run.dev.ppl,
        lb: run.dev.lb,
        max_frequency,
        log: format_train_log(&run.outcome.log),
    })
}

/// Runs every (cell, seed) pair in parallel and assembles rows in cell order.
pub fn run_ablation(preset: Preset, base: &RunConfig, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let cells = cells(preset, base);
    for c in &cells {
        c.config
            .validate()
            .map_err(|e| Error::config(format!("cell {}: {e}", c.label)))?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let results: Vec<Result<SeedResult>> = jobs.par_iter().map(|&(i, s)| run_cell(&cells[i], s)).collect();
    let mut results = results.into_iter();
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let seeds = (&mut results).take(seeds.len()).collect::<Result<Vec<_>>>()?;
        let probe = crate::model::MiLoraModel::new(cell.config.model.clone(), 0)?;
        let m = &cell.config.model;
        rows.push(CellResult {
            label: cell.label.clone(),
            k: if m.adapters == AdapterMode::AllExperts { N_MOD } else { m.router.k },
            gating: m.router.gating,
            adapters: m.adapters,
            rank: m.lora_rank,
            lambda_lb: cell.config.train.lambda_lb,
            tunable_params: probe.tunable_param_count(),
            seeds,
        });
    }
    Ok(AblationTable { preset, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn preset_cells() {
        let base = ablation_base();
        let labels = |p| cells(p, &base).into_iter().map(|c| c.label).collect::<Vec<_>>();
        assert_eq!(labels(Preset::Variants).len(), 6);
        assert_eq!(labels(Preset::KSweep).last().map(String::as_str), Some("lora"));
        assert_eq!(labels(Preset::KSweep).len(), 9);
        assert_eq!(labels(Preset::LambdaSweep)[0], "lambda=0");
        assert_eq!(labels(Preset::RankSweep), ["r=2", "r=4", "r=8", "r=16", "r=32"]);
        for p in Preset::ALL {
            assert_eq!(Preset::parse(p.as_str()), Some(p));
            for c in cells(p, &base) {
                c.config.validate().unwrap();
            }
        }
    }
}
