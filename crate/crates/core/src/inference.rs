//! Generation with a routing decision made once per request.
//!
//! Prefill runs the prompt through the model, evaluating each layer's router
//! on the pooled prompt states. In prompt-aware mode that decision is frozen
//! and reused by every decode step of every beam; the per-token baseline
//! instead re-evaluates the routers from the newest position at each step.
//! Every forward pass is accounted for in [`OpCounters`].

use std::time::Duration;

use crate::backbone::{AdapterHook, KvCache};
use crate::error::{Error, Result};
use crate::lora::activated_param_count;
use crate::model::{DecisionHook, MiLoraModel, RoutingHook};
use crate::numcore::Graph;
use crate::router::{argmax, GatingMode, RoutingDecision, N_MOD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationMode {
    /// Route once from the prompt; reuse the decision for every token.
    PromptAware,
    /// Re-route at every decode step from the last position.
    PerTokenBaseline,
}

impl GenerationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GenerationMode::PromptAware => "prompt-aware",
            GenerationMode::PerTokenBaseline => "per-token",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "prompt-aware" => Some(GenerationMode::PromptAware),
            "per-token" => Some(GenerationMode::PerTokenBaseline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationConfig {
    pub mode: GenerationMode,
    pub beam_size: usize,
    pub max_new_tokens: usize,
    /// Greedy decoding; otherwise beam search with `beam_size` beams.
    pub greedy: bool,
    /// Generation stops once this token is emitted.
    pub eos: Option<usize>,
    /// Keep a copy of the decision applied at every decode forward.
    pub record_trace: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            mode: GenerationMode::PromptAware,
            beam_size: 3,
            max_new_tokens: 16,
            greedy: false,
            eos: None,
            record_trace: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("beam_size must be at least 1"));
        }
        Ok(())
    }
}

/// Exact work done by one request. Reset per request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub router_evals: u64,
    pub adapter_macs: u64,
    /// Most adapter + router parameters touched by any single forward.
    pub activated_params: u64,
    /// Generation steps after prefill.
    pub decode_steps: u64,
    /// Single-token forwards against a cache (one per beam per step).
    pub decode_forwards: u64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Sum of next-token log-probabilities of `tokens`.
    pub log_prob: f64,
    pub counters: OpCounters,
    /// The decision made during prefill.
    pub decision: RoutingDecision,
    /// Decision applied at each decode forward, if requested.
    pub trace: Vec<RoutingDecision>,
}

/// A prefilled request: cache, decision and the next-token distribution.
#[derive(Debug, Clone)]
pub struct PrefillState {
    pub cache: KvCache,
    pub decision: RoutingDecision,
    pub log_probs: Vec<f64>,
    pub counters: OpCounters,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn touch(counters: &mut OpCounters, model: &MiLoraModel, decision: &RoutingDecision) {
    let n = activated_param_count(decision, &model.experts, model.router_param_count()) as u64;
    counters.activated_params = counters.activated_params.max(n);
}

/// Runs the prompt, routing every layer once from the pooled prompt states.
pub fn prefill(model: &MiLoraModel, prompt: &[usize]) -> Result<PrefillState> {
    if prompt.is_empty() {
        return Err(Error::input("empty prompt"));
    }
    let mut cache = KvCache::new(model.n_layers());
    let mut g = Graph::inference(&model.store);
    let mut hook = RoutingHook::new(model, prompt.len());
    let out = model.backbone.forward(&mut g, prompt, Some(&mut cache), &mut hook)?;
    let logits = g.value(out.logits);
    let log_probs = log_softmax(logits.row_slice(logits.rows() - 1));
    let decision = hook.decision();
    let mut counters = OpCounters {
        router_evals: hook.router_evals,
        adapter_macs: out.adapter_macs,
        ..OpCounters::default()
    };
    touch(&mut counters, model, &decision);
    Ok(PrefillState {
        cache,
        decision,
        log_probs,
        counters,
    })
}

/// One cached forward of `token`. Prompt-aware mode applies `decision` and
/// never evaluates a router; the baseline re-routes from this position.
/// Returns the next-token log-probabilities and the decision applied.
pub fn decode_step(
    model: &MiLoraModel,
    mode: GenerationMode,
    decision: Option<&RoutingDecision>,
    cache: &mut KvCache,
    token: usize,
    counters: &mut OpCounters,
) -> Result<(Vec<f64>, RoutingDecision)> {
    let mut g = Graph::inference(&model.store);
    let (out, applied, evals) = match mode {
        GenerationMode::PromptAware => {
            let decision = decision.ok_or_else(|| Error::contract("decode step without a routing decision"))?;
            if decision.layers.len() != model.n_layers() {
                return Err(Error::contract(format!(
                    "routing decision covers {} layers, model has {}",
                    decision.layers.len(),
                    model.n_layers()
                )));
            }
            let mut hook = DecisionHook::new(model, decision);
            let out = model.backbone.forward(&mut g, &[token], Some(cache), &mut hook)?;
            (out, decision.clone(), 0)
        }
        GenerationMode::PerTokenBaseline => {
            let mut hook = RoutingHook::new(model, 1);
            let out = model.backbone.forward(&mut g, &[token], Some(cache), &mut hook as &mut dyn AdapterHook)?;
            let evals = hook.router_evals;
            (out, hook.decision(), evals)
        }
    };
    counters.router_evals += evals;
    counters.adapter_macs += out.adapter_macs;
    counters.decode_forwards += 1;
    touch(counters, model, &applied);
    Ok((log_softmax(g.value(out.logits).row_slice(0)), applied))
}

/// Generates a continuation of `prompt` under `cfg`.
pub fn generate(model: &MiLoraModel, prompt: &[usize], cfg: &GenerationConfig) -> Result<Generation> {
    cfg.validate()?;
    if cfg.greedy {
        let mut choose = |lp: &[f64], _: usize| Some(argmax(lp));
        decode_path(model, prompt, cfg, &mut choose)
    } else {
        beam_search(model, prompt, cfg)
    }
}

/// Teacher-forces `continuation` through the generation path, so counters
/// can be compared across configurations on an identical token trace.
pub fn forced_decode(
    model: &MiLoraModel,
    prompt: &[usize],
    continuation: &[usize],
    mode: GenerationMode,
) -> Result<Generation> {
    let cfg = GenerationConfig {
        mode,
        max_new_tokens: continuation.len(),
        greedy: true,
        ..GenerationConfig::default()
    };
    let mut choose = |_: &[f64], step: usize| continuation.get(step).copied();
    decode_path(model, prompt, &cfg, &mut choose)
}

fn decode_path(
    model: &MiLoraModel,
    prompt: &[usize],
    cfg: &GenerationConfig,
    choose: &mut dyn FnMut(&[f64], usize) -> Option<usize>,
) -> Result<Generation> {
    let PrefillState {
        mut cache,
        decision,
        mut log_probs,
        mut counters,
    } = prefill(model, prompt)?;
    let mut tokens = Vec::with_capacity(cfg.max_new_tokens);
    let mut trace = Vec::new();
    let mut total = 0.0;
    for step in 0..cfg.max_new_tokens {
        let Some(tok) = choose(&log_probs, step) else { break };
        if tok >= log_probs.len() {
            return Err(Error::input(format!("token id {tok} outside vocabulary of {}", log_probs.len())));
        }
        total += log_probs[tok];
        tokens.push(tok);
        if step + 1 == cfg.max_new_tokens || cfg.eos == Some(tok) {
            break;
        }
        counters.decode_steps += 1;
        let (next, applied) = decode_step(model, cfg.mode, Some(&decision), &mut cache, tok, &mut counters)?;
        if cfg.record_trace {
            trace.push(applied);
        }
        log_probs = next;
    }
    counters.tokens = tokens.len() as u64;
    Ok(Generation {
        tokens,
        log_prob: total,
        counters,
        decision,
        trace,
    })
}

struct Beam {
    tokens: Vec<usize>,
    score: f64,
    cache: KvCache,
    log_probs: Vec<f64>,
}

fn mean_score(tokens: &[usize], score: f64) -> f64 {
    score / tokens.len().max(1) as f64
}

/// Length-normalized beam search. In prompt-aware mode every beam decodes
/// against the single decision made during prefill.
pub fn beam_search(model: &MiLoraModel, prompt: &[usize], cfg: &GenerationConfig) -> Result<Generation> {
    cfg.validate()?;
    let PrefillState {
        cache,
        decision,
        log_probs,
        mut counters,
    } = prefill(model, prompt)?;
    let mut trace = Vec::new();
    let mut alive = vec![Beam {
        tokens: Vec::new(),
        score: 0.0,
        cache,
        log_probs,
    }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();

    for step in 0..cfg.max_new_tokens {
        // Every alive beam has the same length, so sums rank like means.
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, beam) in alive.iter().enumerate() {
            for (tok, lp) in beam.log_probs.iter().enumerate() {
                cands.push((beam.score + lp, bi, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(cfg.beam_size);

        let last = step + 1 == cfg.max_new_tokens;
        let mut next = Vec::with_capacity(cands.len());
        let mut stepped = false;
        for (score, bi, tok) in cands {
            let mut tokens = alive[bi].tokens.clone();
            tokens.push(tok);
            if last || cfg.eos == Some(tok) {
                finished.push((tokens, score));
                continue;
            }
            if !stepped {
                counters.decode_steps += 1;
                stepped = true;
            }
            let mut cache = alive[bi].cache.clone();
            let (lp, applied) = decode_step(model, cfg.mode, Some(&decision), &mut cache, tok, &mut counters)?;
            if cfg.record_trace {
                trace.push(applied);
            }
            next.push(Beam {
                tokens,
                score,
                cache,
                log_probs: lp,
            });
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }

    // First best by mean log-probability, in the order hypotheses finished.
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (tokens, score) in finished {
        let better = match &best {
            None => true,
            Some((bt, bs)) => mean_score(&tokens, score) > mean_score(bt, *bs),
        };
        if better {
            best = Some((tokens, score));
        }
    }
    let (tokens, log_prob) = best.unwrap_or((Vec::new(), 0.0));
    counters.tokens = tokens.len() as u64;
    Ok(Generation {
        tokens,
        log_prob,
        counters,
        decision,
        trace,
    })
}

/// One completed request for the efficiency table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRun {
    pub mode: GenerationMode,
    pub k: usize,
    pub gating: GatingMode,
    pub counters: OpCounters,
    pub wall: Duration,
}

impl BenchRun {
    pub fn wall_tps(&self) -> f64 {
        let secs = self.wall.as_secs_f64();
        if secs > 0.0 {
            self.counters.tokens as f64 / secs
        } else {
            0.0
        }
    }
}

pub const BENCH_HEADER: &str = "mode,k,gating,tokens,router_evals,adapter_macs,activated_params,wall_tps";

/// Per-token routing in a module-level mixture would evaluate one router per
/// module rather than per layer; multiply baseline router counts by this to
/// compare against that design.
pub const MODULE_ROUTER_MULTIPLIER: u64 = N_MOD as u64;

/// Comma-separated efficiency table, one row per run in the given order.
pub fn bench_report(runs: &[BenchRun]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::contract("bench report needs at least one run"));
    }
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in runs {
        let c = &r.counters;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3}\n",
            r.mode.as_str(),
            r.k,
            r.gating.as_str(),
            c.tokens,
            c.router_evals,
            c.adapter_macs,
            c.activated_params,
            r.wall_tps()
        ));
    }
    Ok(out)
}

/// Prompt-aware over baseline ratios, summed over runs of each mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRatios {
    pub router_evals: f64,
    pub adapter_macs: f64,
    pub activated_params: f64,
}

pub fn bench_ratios(runs: &[BenchRun]) -> Option<BenchRatios> {
    let total = |mode: GenerationMode, f: &dyn Fn(&OpCounters) -> u64| -> Option<f64> {
        let picked: Vec<u64> = runs.iter().filter(|r| r.mode == mode).map(|r| f(&r.counters)).collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<u64>() as f64)
    };
    let ratio = |f: &dyn Fn(&OpCounters) -> u64| -> Option<f64> {
        let a = total(GenerationMode::PromptAware, f)?;
        let b = total(GenerationMode::PerTokenBaseline, f)?;
        Some(if b == 0.0 { f64::NAN } else { a / b })
    };
    Some(BenchRatios {
        router_evals: ratio(&|c| c.router_evals)?,
        adapter_macs: ratio(&|c| c.adapter_macs)?,
        activated_params: ratio(&|c| c.activated_params)?,
    })
}

pub fn format_ratios(r: &BenchRatios) -> String {
    format!(
        "ratio,value\nrouter_evals,{:.6}\nadapter_macs,{:.6}\nactivated_params,{:.6}\n",
        r.router_evals, r.adapter_macs, r.activated_params
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::ModelConfig;
    use crate::numcore::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(vocab: usize, seed: u64) -> MiLoraModel {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                vocab_size: vocab,
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                d_ffn: 24,
                max_seq_len: 48,
                ..BackboneConfig::default()
            },
            lora_rank: 2,
            ..ModelConfig::default()
        };
        let mut m = MiLoraModel::new(cfg, seed).unwrap();
        perturb(&mut m, seed);
        m
    }

    // Random non-zero adapters and routers so every path matters.
    fn perturb(m: &mut MiLoraModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let ids: Vec<_> = m
            .store
            .iter()
            .filter(|(_, p)| p.trainable && !p.name().contains("rational"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let v = m.store.value(id);
            let data = v.data().iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect();
            let t = Tensor::new(v.shape().to_vec(), data).unwrap();
            m.store.set_value(id, t).unwrap();
        }
    }

    #[test]
    fn route_once_counts() {
        let m = model(10, 1);
        for beam in [1, 3] {
            let cfg = GenerationConfig {
                max_new_tokens: 10,
                beam_size: beam,
                record_trace: true,
                ..GenerationConfig::default()
            };
            let out = generate(&m, &[1, 2, 3], &cfg).unwrap();
            assert_eq!(out.counters.router_evals, 2);
            assert_eq!(out.tokens.len(), 10);
            assert!(out.trace.iter().all(|d| *d == out.decision));
        }
        let cfg = GenerationConfig {
            mode: GenerationMode::PerTokenBaseline,
            max_new_tokens: 10,
            greedy: true,
            ..GenerationConfig::default()
        };
        let out = generate(&m, &[1, 2, 3], &cfg).unwrap();
        assert_eq!(out.counters.router_evals, 2 * 10);
        assert_eq!(out.counters.decode_steps, 9);
    }

    #[test]
    fn zero_new_tokens_is_prefill_only() {
        let m = model(10, 2);
        let cfg = GenerationConfig {
            max_new_tokens: 0,
            greedy: true,
            ..GenerationConfig::default()
        };
        let out = generate(&m, &[4, 5], &cfg).unwrap();
        assert!(out.tokens.is_empty());
        assert_eq!(out.counters, prefill(&m, &[4, 5]).unwrap().counters);
        let out = beam_search(&m, &[4, 5], &GenerationConfig { max_new_tokens: 0, ..cfg }).unwrap();
        assert!(out.tokens.is_empty());
    }

    #[test]
    fn empty_prompt_and_zero_beam_rejected() {
        let m = model(10, 2);
        assert!(matches!(generate(&m, &[], &GenerationConfig::default()), Err(Error::Input(_))));
        let cfg = GenerationConfig { beam_size: 0, ..GenerationConfig::default() };
        assert!(matches!(generate(&m, &[1], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn decode_without_decision_is_a_contract_error() {
        let m = model(10, 2);
        let mut st = prefill(&m, &[1, 2]).unwrap();
        let mut c = OpCounters::default();
        let r = decode_step(&m, GenerationMode::PromptAware, None, &mut st.cache, 3, &mut c);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..4 {
            let m = model(9, seed);
            let greedy = generate(
                &m,
                &[3, 1, 4],
                &GenerationConfig { greedy: true, max_new_tokens: 6, ..GenerationConfig::default() },
            )
            .unwrap();
            let beam = generate(
                &m,
                &[3, 1, 4],
                &GenerationConfig { beam_size: 1, max_new_tokens: 6, ..GenerationConfig::default() },
            )
            .unwrap();
            assert_eq!(greedy.tokens, beam.tokens);
            assert_eq!(greedy.log_prob, beam.log_prob);
            assert_eq!(greedy.counters, beam.counters);
        }
    }

    #[test]
    fn eos_stops_generation() {
        let m = model(9, 5);
        let free = generate(&m, &[2], &GenerationConfig { greedy: true, max_new_tokens: 5, ..GenerationConfig::default() }).unwrap();
        let eos = free.tokens[1];
        let cut = generate(
            &m,
            &[2],
            &GenerationConfig { greedy: true, max_new_tokens: 5, eos: Some(eos), ..GenerationConfig::default() },
        )
        .unwrap();
        let stop = free.tokens.iter().position(|&t| t == eos).unwrap();
        assert_eq!(cut.tokens, free.tokens[..=stop]);
    }

    #[test]
    fn forced_decode_scores_match_greedy() {
        let m = model(9, 6);
        let cfg = GenerationConfig { greedy: true, max_new_tokens: 5, ..GenerationConfig::default() };
        let g = generate(&m, &[1, 7], &cfg).unwrap();
        let f = forced_decode(&m, &[1, 7], &g.tokens, GenerationMode::PromptAware).unwrap();
        assert_eq!(g.log_prob, f.log_prob);
        assert_eq!(g.counters, f.counters);
    }

    #[test]
    fn bench_table_layout() {
        let run = |mode, evals| BenchRun {
            mode,
            k: 3,
            gating: GatingMode::Weighted,
            counters: OpCounters { router_evals: evals, tokens: 32, adapter_macs: 10, activated_params: 5, ..OpCounters::default() },
            wall: Duration::from_secs(2),
        };
        let runs = [run(GenerationMode::PromptAware, 4), run(GenerationMode::PerTokenBaseline, 128)];
        let table = bench_report(&runs).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], BENCH_HEADER);
        assert_eq!(lines[1], "prompt-aware,3,weighted,32,4,10,5,16.000");
        assert_eq!(bench_ratios(&runs).unwrap().router_evals, 1.0 / 32.0);
        assert!(bench_report(&[]).is_err());
    }
}
