//! Flat `key = value` run configuration with dotted section keys.
//!
//! ```text
//! seed = 0
//! backbone.d_model = 64
//! router.k = 3
//! task.kind = copy
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. Missing keys keep their defaults.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::harness::data::TaskSpec;
use crate::model::{AdapterMode, ModelConfig};
use crate::router::{denominator_as_str, parse_denominator, ActivationKind, GatingMode, PoolerKind};
use crate::training::{LrSchedule, TrainConfig};

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "MILORA_OUT_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub kind: String,
    pub vocab: usize,
    pub len: usize,
    pub modulus: usize,
    pub path: PathBuf,
    pub window: usize,
    /// `(kind, weight)` pairs used when `kind = mix`.
    pub mix: Vec<(String, f64)>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: "copy".into(),
            vocab: 16,
            len: 8,
            modulus: 97,
            path: PathBuf::new(),
            window: 16,
            mix: vec![("copy".into(), 1.0), ("reverse".into(), 1.0)],
        }
    }
}

impl TaskConfig {
    fn single(&self, kind: &str) -> Result<TaskSpec> {
        Ok(match kind {
            "copy" => TaskSpec::Copy { vocab: self.vocab, len: self.len },
            "reverse" => TaskSpec::Reverse { vocab: self.vocab, len: self.len },
            "modular" => TaskSpec::ModularArithmetic { p: self.modulus },
            "charlm" => TaskSpec::CharLM { path: self.path.clone(), window: self.window },
            other => return Err(Error::config(format!("unknown task kind `{other}`"))),
        })
    }

    pub fn spec(&self) -> Result<TaskSpec> {
        let spec = if self.kind == "mix" {
            let parts = self
                .mix
                .iter()
                .map(|(k, w)| Ok((self.single(k)?, *w)))
                .collect::<Result<Vec<_>>>()?;
            TaskSpec::MultiTaskMix(parts)
        } else {
            self.single(&self.kind)?
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    /// Backbone language-model steps before adaptation; 0 keeps it random.
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 0,
            lr: 3e-3,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub task: TaskConfig,
    pub n_samples: usize,
    pub out_dir: PathBuf,
    /// Seeds the dataset, initialization and batch order.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::copy_preset()
    }
}

impl RunConfig {
    /// Copy task, vocabulary 16, length 8, on a two-layer toy backbone.
    pub fn copy_preset() -> Self {
        RunConfig {
            model: ModelConfig {
                backbone: BackboneConfig {
                    vocab_size: 16,
                    d_model: 64,
                    n_layers: 2,
                    n_heads: 4,
                    d_ffn: 128,
                    max_seq_len: 32,
                    ..BackboneConfig::default()
                },
                lora_rank: 8,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr_omega: 1e-2,
                lr_theta: 1e-3,
                max_epochs: 100,
                max_steps: 2000,
                eval_every: 200,
                patience: 10,
                ..TrainConfig::default()
            },
            pretrain: PretrainConfig::default(),
            task: TaskConfig::default(),
            n_samples: 4000,
            out_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "copy" => Some(RunConfig::copy_preset()),
            _ => None,
        }
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        self.task.spec()
    }

    /// `out_dir`, unless overridden by the environment.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let spec = self.task_spec()?;
        if spec.vocab_size() > self.model.backbone.vocab_size {
            return Err(Error::config(format!(
                "task needs a vocabulary of {}, backbone has {}",
                spec.vocab_size(),
                self.model.backbone.vocab_size
            )));
        }
        if spec.max_len() > self.model.backbone.max_seq_len {
            return Err(Error::config(format!(
                "task sequences reach {} tokens, backbone.max_seq_len is {}",
                spec.max_len(),
                self.model.backbone.max_seq_len
            )));
        }
        if self.n_samples < 2 {
            return Err(Error::config("data.n_samples must be at least 2"));
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = &self.model.backbone;
        let r = &self.model.router;
        let t = &self.train;
        let mix = self
            .task
            .mix
            .iter()
            .map(|(k, w)| format!("{k}:{w}"))
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("backbone.vocab_size", b.vocab_size.to_string()),
            ("backbone.d_model", b.d_model.to_string()),
            ("backbone.n_layers", b.n_layers.to_string()),
            ("backbone.n_heads", b.n_heads.to_string()),
            ("backbone.d_ffn", b.d_ffn.to_string()),
            ("backbone.max_seq_len", b.max_seq_len.to_string()),
            ("backbone.rope_base", b.rope_base.to_string()),
            ("backbone.norm_eps", b.norm_eps.to_string()),
            ("backbone.init_scale", b.init_scale.to_string()),
            ("lora.rank", self.model.lora_rank.to_string()),
            ("adapters.mode", self.model.adapters.as_str().into()),
            ("router.k", r.k.to_string()),
            ("router.pooler", r.pooler.as_str().into()),
            ("router.gating", r.gating.as_str().into()),
            ("router.activation", r.activation.as_str().into()),
            ("router.rational_m", r.rational_m.to_string()),
            ("router.rational_n", r.rational_n.to_string()),
            ("router.denominator", denominator_as_str(r.denominator).into()),
            ("router.init_std", r.init_std.to_string()),
            ("train.lr_omega", t.lr_omega.to_string()),
            ("train.lr_theta", t.lr_theta.to_string()),
            ("train.lambda_lb", t.lambda_lb.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.max_steps", t.max_steps.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.schedule", t.schedule.as_str().into()),
            ("train.warmup_frac", t.warmup_frac.to_string()),
            ("train.bilevel", t.bilevel.to_string()),
            ("train.lb_in_theta_step", t.lb_in_theta_step.to_string()),
            ("train.target_accuracy", t.target_accuracy.to_string()),
            ("pretrain.steps", self.pretrain.steps.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("task.kind", self.task.kind.clone()),
            ("task.vocab", self.task.vocab.to_string()),
            ("task.len", self.task.len.to_string()),
            ("task.modulus", self.task.modulus.to_string()),
            ("task.path", self.task.path.display().to_string()),
            ("task.window", self.task.window.to_string()),
            ("task.mix", mix),
            ("data.n_samples", self.n_samples.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let b = &mut self.model.backbone;
        let r = &mut self.model.router;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "backbone.vocab_size" => b.vocab_size = num(key, v)?,
            "backbone.d_model" => b.d_model = num(key, v)?,
            "backbone.n_layers" => b.n_layers = num(key, v)?,
            "backbone.n_heads" => b.n_heads = num(key, v)?,
            "backbone.d_ffn" => b.d_ffn = num(key, v)?,
            "backbone.max_seq_len" => b.max_seq_len = num(key, v)?,
            "backbone.rope_base" => b.rope_base = num(key, v)?,
            "backbone.norm_eps" => b.norm_eps = num(key, v)?,
            "backbone.init_scale" => b.init_scale = num(key, v)?,
            "lora.rank" => self.model.lora_rank = num(key, v)?,
            "adapters.mode" => self.model.adapters = named(key, v, AdapterMode::parse)?,
            "router.k" => r.k = num(key, v)?,
            "router.pooler" => r.pooler = named(key, v, PoolerKind::parse)?,
            "router.gating" => r.gating = named(key, v, GatingMode::parse)?,
            "router.activation" => r.activation = named(key, v, ActivationKind::parse)?,
            "router.rational_m" => r.rational_m = num(key, v)?,
            "router.rational_n" => r.rational_n = num(key, v)?,
            "router.denominator" => r.denominator = named(key, v, parse_denominator)?,
            "router.init_std" => r.init_std = num(key, v)?,
            "train.lr_omega" => t.lr_omega = num(key, v)?,
            "train.lr_theta" => t.lr_theta = num(key, v)?,
            "train.lambda_lb" => t.lambda_lb = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.max_epochs" => t.max_epochs = num(key, v)?,
            "train.max_steps" => t.max_steps = num(key, v)?,
            "train.eval_every" => t.eval_every = num(key, v)?,
            "train.patience" => t.patience = num(key, v)?,
            "train.schedule" => t.schedule = named(key, v, LrSchedule::parse)?,
            "train.warmup_frac" => t.warmup_frac = num(key, v)?,
            "train.bilevel" => t.bilevel = num(key, v)?,
            "train.lb_in_theta_step" => t.lb_in_theta_step = num(key, v)?,
            "train.target_accuracy" => t.target_accuracy = num(key, v)?,
            "pretrain.steps" => self.pretrain.steps = num(key, v)?,
            "pretrain.lr" => self.pretrain.lr = num(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = num(key, v)?,
            "task.kind" => self.task.kind = v.to_string(),
            "task.vocab" => self.task.vocab = num(key, v)?,
            "task.len" => self.task.len = num(key, v)?,
            "task.modulus" => self.task.modulus = num(key, v)?,
            "task.path" => self.task.path = PathBuf::from(v),
            "task.window" => self.task.window = num(key, v)?,
            "task.mix" => self.task.mix = parse_mix(v)?,
            "data.n_samples" => self.n_samples = num(key, v)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| Error::config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn named<T>(key: &str, v: &str, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
    parse(v).ok_or_else(|| Error::config(format!("`{key}`: unknown value `{v}`")))
}

fn parse_mix(v: &str) -> Result<Vec<(String, f64)>> {
    v.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, w) = p
                .split_once(':')
                .ok_or_else(|| Error::config(format!("`task.mix`: expected kind:weight, got `{p}`")))?;
            Ok((k.trim().to_string(), num("task.mix", w.trim())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_default_and_edited() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);

        let mut edited = cfg.clone();
        edited.model.router.k = 5;
        edited.model.router.pooler = PoolerKind::Max;
        edited.train.lr_omega = 0.1 + 0.2;
        edited.task.kind = "mix".into();
        edited.task.mix = vec![("copy".into(), 0.25), ("modular".into(), 0.75)];
        let text = edited.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), edited);
        assert_eq!(RunConfig::parse(&text).unwrap().to_text(), text);
    }

    #[test]
    fn partial_text_keeps_defaults() {
        let cfg = RunConfig::parse("# comment\n\nrouter.k = 2\n  seed=9 \n").unwrap();
        assert_eq!(cfg.model.router.k, 2);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.backbone, RunConfig::default().model.backbone);
    }

    #[test]
    fn bad_text_is_a_config_error() {
        for bad in [
            "no equals sign",
            "router.kk = 3",
            "router.k = three",
            "router.pooler = median",
            "seed = 1\nseed = 2",
            "train.bilevel = yes",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        let err = RunConfig::parse("seed = 1\nrouter.kk = 3").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn validation_checks_task_against_backbone() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.task.vocab = 40;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.task.len = 20;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.task.kind = "sorting".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
