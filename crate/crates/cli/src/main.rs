use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use milora_core::harness::checkpoint::load_checkpoint;
use milora_core::harness::config::RunConfig;
use milora_core::harness::run::{dataset, run_training, write_run};
use milora_core::harness::{ablation_base, expert_distribution, parse_tokens, route_dump, run_ablation, Preset};
use milora_core::inference::{
    bench_ratios, bench_report, format_ratios, generate, BenchRun, GenerationConfig, GenerationMode,
    MODULE_ROUTER_MULTIPLIER,
};
use milora_core::model::MiLoraModel;
use milora_core::training::SEP_TOKEN;
use milora_core::Error;

#[derive(Parser)]
#[command(name = "milora", version, about = "Prompt-routed LoRA experts: train, generate, benchmark, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file (or the name of a built-in preset).
    Train {
        config: String,
        /// Output directory; overrides the config and the environment.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a continuation from a checkpoint.
    Generate {
        checkpoint: PathBuf,
        /// Prompt tokens, comma or space separated.
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 8)]
        max_new_tokens: usize,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long)]
        greedy: bool,
        #[arg(long, default_value = "prompt-aware")]
        mode: String,
        /// Do not append the separator token to the prompt.
        #[arg(long)]
        raw: bool,
    },
    /// Operation counters for each generation mode.
    Bench {
        checkpoint: PathBuf,
        #[arg(long, default_value = "prompt-aware,per-token")]
        modes: String,
        /// Prompts to run; defaults to the first dev prompts of the checkpoint's task.
        #[arg(long)]
        prompt: Vec<String>,
        #[arg(long, default_value_t = 4)]
        prompts: usize,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long)]
        greedy: bool,
    },
    /// Run an ablation preset: variants, k-sweep, lambda-sweep, rank-sweep.
    Ablate {
        preset: String,
        /// Base config; defaults to the built-in ablation base.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-prompt routing: one row per prompt, layer and module.
    RouteDump {
        checkpoint: PathBuf,
        /// `train`, `dev`, or a file with one prompt per line.
        dataset: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Expert selection frequency per layer and module.
    ExpertDist {
        checkpoint: PathBuf,
        dataset: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) => Failure::Usage(e),
            _ => Failure::Run(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn load_config(arg: &str) -> Result<RunConfig, Failure> {
    let path = Path::new(arg);
    if path.exists() {
        return Ok(RunConfig::load(path)?);
    }
    RunConfig::preset(arg).ok_or_else(|| usage(format!("no config file or preset named `{arg}`")))
}

fn parse_mode(s: &str) -> Result<GenerationMode, Failure> {
    GenerationMode::parse(s.trim()).ok_or_else(|| usage(format!("unknown mode `{s}` (prompt-aware, per-token)")))
}

fn emit(output: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match output {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn prompts_for(cfg: &RunConfig, which: &str) -> Result<Vec<Vec<usize>>, Failure> {
    match which {
        "train" | "dev" => {
            let data = dataset(cfg)?;
            let split = if which == "train" { data.train } else { data.dev };
            Ok(split.iter().map(|s| s.routing_prompt()).collect())
        }
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading prompts from {path}"))?;
            let prompts = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(parse_tokens)
                .collect::<Result<Vec<_>, _>>()?;
            Ok(prompts)
        }
    }
}

fn train(config: &str, out: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let dir = out.unwrap_or_else(|| cfg.resolved_out_dir());
    let run = run_training(&cfg)?;
    let files = write_run(&dir, &cfg, &run)?;
    println!(
        "steps={} best_step={} dev_ppl={:.6} dev_accuracy={:.6}",
        run.outcome.steps_run, run.outcome.best_step, run.dev.ppl, run.dev.accuracy
    );
    println!("checkpoint {}", files.checkpoint.display());
    println!("log {}", files.log.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(RunConfig, MiLoraModel), Failure> {
    load_checkpoint(path).map_err(|e| Failure::Run(e.into()))
}

fn with_sep(mut prompt: Vec<usize>, raw: bool) -> Vec<usize> {
    if !raw {
        prompt.push(SEP_TOKEN);
    }
    prompt
}

#[allow(clippy::too_many_arguments)]
fn generate_cmd(ckpt: &Path, prompt: &str, max_new: usize, beam: usize, greedy: bool, mode: &str, raw: bool) -> CmdResult {
    let mode = parse_mode(mode)?;
    let prompt = with_sep(parse_tokens(prompt).map_err(|e| usage(e.to_string()))?, raw);
    let (_, model) = load_model(ckpt)?;
    let cfg = GenerationConfig {
        mode,
        beam_size: beam,
        max_new_tokens: max_new,
        greedy,
        ..GenerationConfig::default()
    };
    let out = generate(&model, &prompt, &cfg)?;
    let toks: Vec<String> = out.tokens.iter().map(|t| t.to_string()).collect();
    println!("{}", toks.join(","));
    let c = out.counters;
    eprintln!(
        "router_evals={} adapter_macs={} activated_params={} decode_steps={}",
        c.router_evals, c.adapter_macs, c.activated_params, c.decode_steps
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench(ckpt: &Path, modes: &str, prompt: &[String], n_prompts: usize, max_new: Option<usize>, beam: usize, greedy: bool) -> CmdResult {
    let modes = modes.split(',').map(parse_mode).collect::<Result<Vec<_>, _>>()?;
    let (cfg, model) = load_model(ckpt)?;
    let prompts: Vec<Vec<usize>> = if prompt.is_empty() {
        prompts_for(&cfg, "dev")?.into_iter().take(n_prompts.max(1)).collect()
    } else {
        prompt
            .iter()
            .map(|p| parse_tokens(p).map(|t| with_sep(t, false)))
            .collect::<Result<_, _>>()
            .map_err(|e| usage(e.to_string()))?
    };
    let room = prompts
        .iter()
        .map(|p| model.config.backbone.max_seq_len.saturating_sub(p.len()))
        .min()
        .unwrap_or(0);
    let max_new = max_new.unwrap_or(room.min(32));
    let mut runs = Vec::new();
    for mode in modes {
        for p in &prompts {
            let gen = GenerationConfig {
                mode,
                beam_size: beam,
                max_new_tokens: max_new,
                greedy,
                ..GenerationConfig::default()
            };
            let start = Instant::now();
            let out = generate(&model, p, &gen)?;
            runs.push(BenchRun {
                mode,
                k: model.config.router.k,
                gating: model.config.router.gating,
                counters: out.counters,
                wall: start.elapsed(),
            });
        }
    }
    print!("{}", bench_report(&runs)?);
    if let Some(r) = bench_ratios(&runs) {
        println!();
        print!("{}", format_ratios(&r));
    }
    eprintln!(
        "note: per-token router_evals count one router per layer; a per-module router design evaluates {MODULE_ROUTER_MULTIPLIER}x as many"
    );
    Ok(())
}

fn ablate(preset: &str, config: Option<PathBuf>, seeds: &[u64], out: Option<PathBuf>) -> CmdResult {
    let preset = Preset::parse(preset)
        .ok_or_else(|| usage(format!("unknown preset `{preset}` (variants, k-sweep, lambda-sweep, rank-sweep)")))?;
    let base = match config {
        Some(p) => RunConfig::load(&p)?,
        None => ablation_base(),
    };
    let table = run_ablation(preset, &base, seeds)?;
    let dir = out.unwrap_or_else(|| base.resolved_out_dir());
    table.write(&dir)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn routes(ckpt: &Path, which: &str, output: Option<PathBuf>, summary: bool) -> CmdResult {
    let (cfg, model) = load_model(ckpt)?;
    let prompts = prompts_for(&cfg, which)?;
    let text = if summary {
        expert_distribution(&model, &prompts)?.to_csv()
    } else {
        route_dump(&model, &prompts)?
    };
    emit(output.as_deref(), &text)?;
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train { config, out } => train(&config, out),
        Command::Generate {
            checkpoint,
            prompt,
            max_new_tokens,
            beam,
            greedy,
            mode,
            raw,
        } => generate_cmd(&checkpoint, &prompt, max_new_tokens, beam, greedy, &mode, raw),
        Command::Bench {
            checkpoint,
            modes,
            prompt,
            prompts,
            max_new_tokens,
            beam,
            greedy,
        } => bench(&checkpoint, &modes, &prompt, prompts, max_new_tokens, beam, greedy),
        Command::Ablate {
            preset,
            config,
            seeds,
            out,
        } => ablate(&preset, config, &seeds, out),
        Command::RouteDump {
            checkpoint,
            dataset,
            output,
        } => routes(&checkpoint, &dataset, output, false),
        Command::ExpertDist {
            checkpoint,
            dataset,
            output,
        } => routes(&checkpoint, &dataset, output, true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
