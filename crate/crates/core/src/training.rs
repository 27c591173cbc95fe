//! Task and load-balancing losses, the Omega/Theta alternating update and
//! the early-stopped training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backbone::NoAdapters;
use crate::error::{Error, Result};
use crate::model::{AdapterMode, MiLoraModel, RoutingHook};
use crate::numcore::{AdamW, AdamWConfig, Graph, Group, Tensor, Var};
use crate::router::{argmax, load_balance_stats, LayerRoute, N_MOD};

/// Token that separates a prompt from its response.
pub const SEP_TOKEN: usize = 0;

/// One supervised example. The model sees `prompt ++ [SEP]` as the routing
/// prompt and is trained to emit `target` after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub task: String,
}

impl Sample {
    pub fn routing_prompt(&self) -> Vec<usize> {
        let mut p = self.prompt.clone();
        p.push(SEP_TOKEN);
        p
    }

    /// Teacher-forced input and per-position targets (`None` on prompt rows).
    pub fn teacher_forced(&self) -> (Vec<usize>, Vec<Option<usize>>) {
        let mut input = self.routing_prompt();
        let n_p = input.len();
        input.extend_from_slice(&self.target[..self.target.len().saturating_sub(1)]);
        let mut targets = vec![None; n_p - 1];
        targets.extend(self.target.iter().map(|&t| Some(t)));
        (input, targets)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over a fraction of the steps, then linear decay to 0.
    WarmupLinear,
}

impl LrSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::WarmupLinear => "warmup-linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(LrSchedule::Constant),
            "warmup-linear" => Some(LrSchedule::WarmupLinear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_omega: f64,
    pub lr_theta: f64,
    pub lambda_lb: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap beyond `max_epochs`.
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub schedule: LrSchedule,
    pub warmup_frac: f64,
    /// Update Theta on dev batches after each Omega step.
    pub bilevel: bool,
    /// Include the load-balancing term in the Theta step's loss.
    pub lb_in_theta_step: bool,
    /// Stop at the first evaluation whose dev accuracy reaches this value and
    /// keep those parameters; 0 disables.
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_omega: 1e-4,
            lr_theta: 1e-6,
            lambda_lb: 1e-2,
            weight_decay: 0.0,
            batch_size: 16,
            max_epochs: 10,
            max_steps: 0,
            eval_every: 200,
            patience: 10,
            schedule: LrSchedule::WarmupLinear,
            warmup_frac: 0.06,
            bilevel: true,
            lb_in_theta_step: true,
            target_accuracy: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lb >= 0.0) {
            return Err(Error::config("lambda_lb must be nonnegative"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size, eval_every and max_epochs must be positive"));
        }
        if !(self.lr_omega > 0.0 && self.lr_theta > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(Error::config("target_accuracy must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config("warmup_frac must be in [0, 1)"));
        }
        Ok(())
    }

    fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => base,
            LrSchedule::WarmupLinear => {
                let warm = ((total as f64) * self.warmup_frac).ceil().max(1.0);
                let s = step as f64 + 1.0;
                let f = if s <= warm {
                    s / warm
                } else {
                    ((total as f64 - s + 1.0) / (total as f64 - warm + 1.0)).max(0.0)
                };
                // keep strictly positive for the optimizer contract
                (base * f).max(base * 1e-6)
            }
        }
    }
}

/// Mean negative log-likelihood over unmasked positions.
pub fn lm_cross_entropy(g: &mut Graph, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    g.cross_entropy(logits, targets)
}

/// `N_mod · Σ f_i p̂_i` per layer, averaged over layers.
pub fn load_balance_loss(g: &mut Graph, stats: &[(Vec<f64>, Var)]) -> Result<Var> {
    if stats.is_empty() {
        return Err(Error::contract("load-balance loss over no layers"));
    }
    let mut per_layer = Vec::with_capacity(stats.len());
    for (f, p_hat) in stats {
        let fc = g.constant(Tensor::row(f.clone()));
        let prod = g.mul(*p_hat, fc)?;
        let s = g.sum(prod)?;
        per_layer.push(g.scale(s, f.len() as f64)?);
    }
    let stacked = g.concat_rows(&per_layer)?;
    g.mean(stacked)
}

/// `ce + λ·lb`; with `λ = 0` the load-balancing term is left out of the graph.
pub fn total_loss(g: &mut Graph, ce: Var, lb: Option<Var>, lambda_lb: f64) -> Result<Var> {
    match lb {
        Some(lb) if lambda_lb != 0.0 => {
            let weighted = g.scale(lb, lambda_lb)?;
            g.add(ce, weighted)
        }
        _ => Ok(ce),
    }
}

/// Losses of one batch. `total` lives in the graph; the rest are values.
pub struct BatchLoss {
    pub total: Var,
    pub ce: f64,
    pub lb: f64,
    pub correct: usize,
    pub tokens: usize,
    pub routes: Vec<Vec<LayerRoute>>,
}

/// Forward a batch with per-prompt routing and build the combined loss.
pub fn batch_loss(g: &mut Graph, model: &MiLoraModel, batch: &[Sample], lambda_lb: f64) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let n_layers = model.n_layers();
    let mut layer_probs: Vec<Vec<Var>> = vec![Vec::with_capacity(batch.len()); n_layers];
    let mut ce_terms = Vec::with_capacity(batch.len());
    let mut counts = Vec::with_capacity(batch.len());
    let mut correct = 0;
    let mut routes = Vec::with_capacity(batch.len());
    for sample in batch {
        let (input, targets) = sample.teacher_forced();
        let mut hook = RoutingHook::new(model, sample.prompt.len() + 1);
        let out = model.backbone.forward(g, &input, None, &mut hook)?;
        let ce = lm_cross_entropy(g, out.logits, &targets)?;
        correct += count_correct(g.value(out.logits), &targets);
        ce_terms.push(ce);
        counts.push(sample.target.len());
        for (l, p) in hook.probs.iter().enumerate() {
            layer_probs[l].push(*p);
        }
        routes.push(hook.routes);
    }
    let tokens: usize = counts.iter().sum();
    let mut weighted = Vec::with_capacity(ce_terms.len());
    for (ce, n) in ce_terms.iter().zip(&counts) {
        weighted.push(g.scale(*ce, *n as f64 / tokens as f64)?);
    }
    let stacked = g.concat_rows(&weighted)?;
    let ce = g.sum(stacked)?;

    let lb = if model.config.adapters == AdapterMode::Routed {
        let mut stats = Vec::with_capacity(n_layers);
        for probs in &layer_probs {
            stats.push(load_balance_stats(g, probs)?);
        }
        Some(load_balance_loss(g, &stats)?)
    } else {
        None
    };
    let total = total_loss(g, ce, lb, lambda_lb)?;
    Ok(BatchLoss {
        total,
        ce: g.value(ce).item()?,
        lb: lb.map_or(Ok(0.0), |v| g.value(v).item())?,
        correct,
        tokens,
        routes,
    })
}

fn count_correct(logits: &Tensor, targets: &[Option<usize>]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|(i, t)| t.is_some_and(|t| argmax(logits.row_slice(*i)) == t))
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub train_total: f64,
    pub train_ce: f64,
    pub train_lb: f64,
    pub val_total: Option<f64>,
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} is {v}")))
    }
}

fn accumulate_grads(model: &mut MiLoraModel, batch: &[Sample], lambda_lb: f64) -> Result<(f64, f64, f64)> {
    let (grads, total, ce, lb) = {
        let mut g = Graph::new(&model.store);
        let loss = batch_loss(&mut g, model, batch, lambda_lb)?;
        let total = g.value(loss.total).item()?;
        check_finite(total, "loss")?;
        (g.backward(loss.total)?, total, loss.ce, loss.lb)
    };
    model.store.accumulate(grads);
    Ok((total, ce, lb))
}

/// Optimizer pair for the two parameter groups.
pub struct Optimizers {
    pub omega: AdamW,
    pub theta: AdamW,
}

impl Optimizers {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let base = AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        };
        Ok(Optimizers {
            omega: AdamW::new(Group::Omega, AdamWConfig { lr: cfg.lr_omega, ..base })?,
            theta: AdamW::new(Group::Theta, AdamWConfig { lr: cfg.lr_theta, ..base })?,
        })
    }
}

/// First-order alternating update: Omega on a train batch, then Theta on a
/// validation batch. Each half only moves its own group.
#[allow(clippy::too_many_arguments)]
pub fn bilevel_step(
    model: &mut MiLoraModel,
    opts: &mut Optimizers,
    cfg: &TrainConfig,
    train_batch: &[Sample],
    val_batch: &[Sample],
    lr_omega: f64,
    lr_theta: f64,
) -> Result<StepStats> {
    if train_batch.is_empty() {
        return Err(Error::contract("empty train batch"));
    }
    model.store.zero_grad();
    let (train_total, train_ce, train_lb) = accumulate_grads(model, train_batch, cfg.lambda_lb)?;
    opts.omega.step(&mut model.store, lr_omega)?;

    let mut val_total = None;
    if cfg.bilevel && model.count_group(Group::Theta) > 0 {
        if val_batch.is_empty() {
            return Err(Error::contract("empty validation batch"));
        }
        model.store.zero_grad();
        let lambda = if cfg.lb_in_theta_step { cfg.lambda_lb } else { 0.0 };
        let (total, _, _) = accumulate_grads(model, val_batch, lambda)?;
        opts.theta.step(&mut model.store, lr_theta)?;
        val_total = Some(total);
    }
    model.store.zero_grad();
    Ok(StepStats {
        train_total,
        train_ce,
        train_lb,
        val_total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub ce: f64,
    pub ppl: f64,
    pub accuracy: f64,
    /// Selection counts per layer and module over the evaluated prompts.
    pub histogram: Vec<[usize; N_MOD]>,
    /// Argmax fraction per layer and module.
    pub argmax_fraction: Vec<[f64; N_MOD]>,
    pub lb: f64,
}

impl EvalMetrics {
    pub fn histogram_hash(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.histogram {
            for c in layer {
                h.update((*c as u64).to_le_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Teacher-forced dev evaluation with routing, no gradients.
pub fn evaluate(model: &MiLoraModel, samples: &[Sample]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation over an empty set"));
    }
    let n_layers = model.n_layers();
    let mut nll = 0.0;
    let mut tokens = 0;
    let mut correct = 0;
    let mut histogram = vec![[0usize; N_MOD]; n_layers];
    let mut argmax_counts = vec![[0usize; N_MOD]; n_layers];
    let mut lb_sum = vec![[0.0f64; N_MOD]; n_layers];
    for chunk in samples.chunks(64) {
        let mut g = Graph::inference(&model.store);
        let loss = batch_loss(&mut g, model, chunk, 0.0)?;
        nll += loss.ce * loss.tokens as f64;
        tokens += loss.tokens;
        correct += loss.correct;
        for routes in &loss.routes {
            for (l, route) in routes.iter().enumerate() {
                for &m in &route.selected {
                    histogram[l][m] += 1;
                }
                argmax_counts[l][argmax(&route.probs)] += 1;
                for (acc, p) in lb_sum[l].iter_mut().zip(&route.probs) {
                    *acc += p;
                }
            }
        }
    }
    let n = samples.len() as f64;
    let argmax_fraction: Vec<[f64; N_MOD]> = argmax_counts
        .iter()
        .map(|c| c.map(|v| v as f64 / n))
        .collect();
    let lb = if model.config.adapters == AdapterMode::Routed {
        argmax_fraction
            .iter()
            .zip(&lb_sum)
            .map(|(f, s)| N_MOD as f64 * f.iter().zip(s).map(|(fi, si)| fi * si / n).sum::<f64>())
            .sum::<f64>()
            / n_layers as f64
    } else {
        0.0
    };
    let ce = nll / tokens as f64;
    Ok(EvalMetrics {
        ce,
        ppl: ce.exp(),
        accuracy: correct as f64 / tokens as f64,
        histogram,
        argmax_fraction,
        lb,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub train_loss: f64,
    pub dev_ppl: f64,
    pub dev_accuracy: f64,
    pub lb_loss: f64,
    pub histogram_hash: String,
}

pub const TRAIN_LOG_HEADER: &str = "step,train_loss,dev_ppl,lb_loss,hist_hash";

impl EvalRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{}",
            self.step, self.train_loss, self.dev_ppl, self.lb_loss, self.histogram_hash
        )
    }
}

pub fn format_train_log(log: &[EvalRecord]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EvalRecord>,
    pub best_step: usize,
    pub best_dev_ppl: f64,
    pub best_values: Vec<Tensor>,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub reached_target: bool,
}

impl TrainOutcome {
    pub fn best_record(&self) -> Option<&EvalRecord> {
        self.log.iter().find(|r| r.step == self.best_step)
    }
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Alternating training with dev evaluation every `eval_every` steps and
/// early stopping after `patience` evaluations without a lower dev
/// perplexity. Leaves the best parameters loaded in `model`.
pub fn train_loop(model: &mut MiLoraModel, splits: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() || splits.dev.is_empty() {
        return Err(Error::contract("training needs nonempty train and dev splits"));
    }
    let mut opts = Optimizers::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7e7a);
    let per_epoch = splits.train.len().div_ceil(cfg.batch_size);
    let mut total_steps = per_epoch * cfg.max_epochs;
    if cfg.max_steps > 0 {
        total_steps = total_steps.min(cfg.max_steps);
    }

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut run_loss = 0.0;
    let mut run_lb = 0.0;
    let mut run_n = 0usize;
    let mut step = 0usize;
    let mut val_queue: Vec<Vec<usize>> = Vec::new();
    let mut stopped_early = false;
    let mut reached_target = false;

    'outer: for _epoch in 0..cfg.max_epochs {
        for batch_idx in batches(splits.train.len(), cfg.batch_size, &mut rng) {
            if step >= total_steps {
                break 'outer;
            }
            let train_batch: Vec<Sample> = batch_idx.iter().map(|&i| splits.train[i].clone()).collect();
            if val_queue.is_empty() {
                val_queue = batches(splits.dev.len(), cfg.batch_size, &mut val_rng);
                val_queue.reverse();
            }
            let val_batch: Vec<Sample> = val_queue
                .pop()
                .expect("refilled above")
                .iter()
                .map(|&i| splits.dev[i].clone())
                .collect();
            let lr_o = cfg.lr_at(cfg.lr_omega, step, total_steps);
            let lr_t = cfg.lr_at(cfg.lr_theta, step, total_steps);
            let stats = bilevel_step(model, &mut opts, cfg, &train_batch, &val_batch, lr_o, lr_t)
                .map_err(|e| match e {
                    Error::NonFinite(op) => Error::Divergence(format!("non-finite {op} at step {step}")),
                    Error::Divergence(msg) => Error::Divergence(format!("{msg} at step {step}")),
                    other => other,
                })?;
            step += 1;
            run_loss += stats.train_total;
            run_lb += stats.train_lb;
            run_n += 1;

            if step % cfg.eval_every == 0 || step == total_steps {
                let m = evaluate(model, &splits.dev)?;
                check_finite(m.ppl, "dev perplexity")?;
                log.push(EvalRecord {
                    step,
                    train_loss: run_loss / run_n as f64,
                    dev_ppl: m.ppl,
                    dev_accuracy: m.accuracy,
                    lb_loss: run_lb / run_n as f64,
                    histogram_hash: m.histogram_hash(),
                });
                run_loss = 0.0;
                run_lb = 0.0;
                run_n = 0;
                if cfg.target_accuracy > 0.0 && m.accuracy >= cfg.target_accuracy {
                    best = Some((m.ppl, step, model.store.values()));
                    reached_target = true;
                    break 'outer;
                }
                if best.as_ref().map_or(true, |(p, _, _)| m.ppl < *p) {
                    best = Some((m.ppl, step, model.store.values()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.patience {
                        stopped_early = true;
                        break 'outer;
                    }
                }
            }
        }
    }
    let (best_dev_ppl, best_step, best_values) = match best {
        Some(b) => b,
        None => {
            let m = evaluate(model, &splits.dev)?;
            (m.ppl, step, model.store.values())
        }
    };
    model.store.restore(&best_values);
    Ok(TrainOutcome {
        log,
        best_step,
        best_dev_ppl,
        best_values,
        steps_run: step,
        stopped_early,
        reached_target,
    })
}

/// Language-model pretraining of the backbone alone on full sequences,
/// then refreezing it.
pub fn pretrain_backbone(model: &mut MiLoraModel, samples: &[Sample], steps: usize, lr: f64, batch_size: usize, seed: u64) -> Result<f64> {
    if steps == 0 {
        return Ok(f64::NAN);
    }
    if samples.is_empty() || batch_size == 0 {
        return Err(Error::contract("pretraining needs samples and a positive batch size"));
    }
    let ids = model.backbone.param_ids();
    let trainable_before: Vec<bool> = model.store.iter().map(|(_, p)| p.trainable).collect();
    for (id, _) in model.store.clone().iter() {
        model.store.get_mut(id).trainable = ids.contains(&id);
    }
    let mut opt = AdamW::new(Group::Omega, AdamWConfig { lr, ..AdamWConfig::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut last = f64::NAN;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    for _ in 0..steps {
        if queue.is_empty() {
            queue = batches(samples.len(), batch_size, &mut rng);
            queue.reverse();
        }
        let batch = queue.pop().expect("refilled");
        model.store.zero_grad();
        let grads = {
            let mut g = Graph::new(&model.store);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in &batch {
                let s = &samples[i];
                let (input, targets) = s.teacher_forced();
                let out = model.backbone.forward(&mut g, &input, None, &mut NoAdapters)?;
                // next-token loss on every position
                let mut all: Vec<Option<usize>> = input[1..].iter().map(|&t| Some(t)).collect();
                all.push(*targets.last().expect("nonempty target"));
                terms.push(g.cross_entropy(out.logits, &all)?);
            }
            let stacked = g.concat_rows(&terms)?;
            let loss = g.mean(stacked)?;
            last = g.value(loss).item()?;
            check_finite(last, "pretraining loss")?;
            g.backward(loss)?
        };
        model.store.accumulate(grads);
        opt.step(&mut model.store, lr)?;
    }
    model.store.zero_grad();
    for ((id, _), was) in model.store.clone().iter().zip(trainable_before) {
        model.store.get_mut(id).trainable = was;
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::ModelConfig;
    use crate::numcore::ParamStore;

    fn tiny_model(seed: u64) -> MiLoraModel {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                vocab_size: 10,
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                d_ffn: 24,
                max_seq_len: 32,
                ..BackboneConfig::default()
            },
            lora_rank: 2,
            ..ModelConfig::default()
        };
        MiLoraModel::new(cfg, seed).unwrap()
    }

    fn copy_samples(n: usize, seed: u64) -> Vec<Sample> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let p: Vec<usize> = (0..4).map(|_| rng.gen_range(1..10)).collect();
                Sample { prompt: p.clone(), target: p, task: "copy".into() }
            })
            .collect()
    }

    #[test]
    fn teacher_forcing_layout() {
        let s = Sample { prompt: vec![7, 3, 9], target: vec![7, 3, 9], task: "copy".into() };
        let (input, targets) = s.teacher_forced();
        assert_eq!(input, vec![7, 3, 9, SEP_TOKEN, 7, 3]);
        assert_eq!(targets, vec![None, None, None, Some(7), Some(3), Some(9)]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let v = 5;
        let uniform = g.constant(Tensor::zeros(3, v));
        let ce = lm_cross_entropy(&mut g, uniform, &[Some(1), None, Some(4)]).unwrap();
        assert!((g.value(ce).item().unwrap() - (v as f64).ln()).abs() < 1e-15);

        let mut sharp = Tensor::full(2, v, -800.0);
        sharp.data_mut()[2] = 0.0;
        sharp.data_mut()[v + 3] = 0.0;
        let sv = g.constant(sharp);
        let ce = lm_cross_entropy(&mut g, sv, &[Some(2), Some(3)]).unwrap();
        assert_eq!(g.value(ce).item().unwrap(), 0.0);

        assert!(matches!(lm_cross_entropy(&mut g, sv, &[None, None]), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_matches_per_token_sum() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::new(vec![6, 7], (0..42).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let targets = [Some(0), None, Some(6), Some(2), None, Some(5)];
        let mut total = 0.0;
        let mut n = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = logits.row_slice(i);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                total += -(row[*t].exp() / z).ln();
                n += 1.0;
            }
        }
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let lv = g.constant(logits);
        let ce = lm_cross_entropy(&mut g, lv, &targets).unwrap();
        assert!((g.value(ce).item().unwrap() - total / n).abs() < 1e-12);
    }

    fn lb_of(stats: Vec<(Vec<f64>, Vec<f64>)>) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let s: Vec<(Vec<f64>, Var)> = stats
            .into_iter()
            .map(|(f, p)| (f, g.constant(Tensor::row(p))))
            .collect();
        let lb = load_balance_loss(&mut g, &s).unwrap();
        g.value(lb).item().unwrap()
    }

    #[test]
    fn load_balance_closed_forms() {
        let u = vec![1.0 / 7.0; 7];
        assert!((lb_of(vec![(u.clone(), u.clone()); 4]) - 1.0).abs() < 1e-12);
        let mut one = vec![0.0; 7];
        one[2] = 1.0;
        assert!((lb_of(vec![(one.clone(), one.clone()); 3]) - 7.0).abs() < 1e-12);
        assert!((lb_of(vec![(vec![1.0, 0.0], vec![0.65, 0.35])]) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn total_loss_combines_linearly() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let ce = g.constant(Tensor::scalar(2.0));
        let lb = g.constant(Tensor::scalar(1.3));
        let t = total_loss(&mut g, ce, Some(lb), 1e-2).unwrap();
        assert!((g.value(t).item().unwrap() - 2.013).abs() < 1e-15);
        let t0 = total_loss(&mut g, ce, Some(lb), 0.0).unwrap();
        assert_eq!(g.value(t0).item().unwrap(), 2.0);
    }

    #[test]
    fn bilevel_step_respects_partition() {
        let mut model = tiny_model(4);
        let cfg = TrainConfig { lr_omega: 1e-2, lr_theta: 1e-2, ..TrainConfig::default() };
        let mut opts = Optimizers::new(&cfg).unwrap();
        let train = copy_samples(4, 1);
        let val = copy_samples(4, 2);
        let theta_ids: Vec<_> = model.store.iter().filter(|(_, p)| p.group() == Group::Theta).map(|(i, _)| i).collect();
        let omega_ids: Vec<_> = model.store.iter().filter(|(_, p)| p.group() == Group::Omega).map(|(i, _)| i).collect();

        let before = model.store.values();
        model.store.zero_grad();
        accumulate_grads(&mut model, &train, cfg.lambda_lb).unwrap();
        opts.omega.step(&mut model.store, cfg.lr_omega).unwrap();
        for id in &theta_ids {
            assert_eq!(model.store.value(*id), &before[id.index()]);
        }
        assert!(omega_ids.iter().any(|id| model.store.value(*id) != &before[id.index()]));

        let mid = model.store.values();
        model.store.zero_grad();
        accumulate_grads(&mut model, &val, cfg.lambda_lb).unwrap();
        opts.theta.step(&mut model.store, cfg.lr_theta).unwrap();
        for id in &omega_ids {
            assert_eq!(model.store.value(*id), &mid[id.index()]);
        }
        assert!(theta_ids.iter().any(|id| model.store.value(*id) != &mid[id.index()]));

        // frozen backbone never moves
        let full = bilevel_step(&mut model, &mut opts, &cfg, &train, &val, 1e-2, 1e-2).unwrap();
        assert!(full.val_total.is_some());
        for id in model.backbone.param_ids() {
            assert_eq!(model.store.value(id), &before[id.index()]);
        }
    }

    #[test]
    fn empty_batch_is_contract_error() {
        let mut model = tiny_model(0);
        let cfg = TrainConfig::default();
        let mut opts = Optimizers::new(&cfg).unwrap();
        assert!(matches!(
            bilevel_step(&mut model, &mut opts, &cfg, &[], &[], 1e-3, 1e-3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn frozen_model_stops_after_two_evaluations() {
        let mut model = tiny_model(1);
        model.store.set_trainable(|_| true, false);
        let splits = DatasetSplit { train: copy_samples(16, 3), dev: copy_samples(4, 4) };
        let cfg = TrainConfig { patience: 1, eval_every: 1, batch_size: 4, max_epochs: 10, ..TrainConfig::default() };
        let out = train_loop(&mut model, &splits, &cfg).unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.stopped_early);
    }

    #[test]
    fn reaching_target_accuracy_stops_and_keeps_parameters() {
        let mut model = tiny_model(1);
        let splits = DatasetSplit { train: copy_samples(32, 3), dev: copy_samples(4, 4) };
        let cfg = TrainConfig { eval_every: 2, batch_size: 4, target_accuracy: 1e-9, ..TrainConfig::default() };
        let out = train_loop(&mut model, &splits, &cfg).unwrap();
        assert!(out.reached_target && !out.stopped_early);
        assert_eq!((out.steps_run, out.best_step, out.log.len()), (2, 2, 1));
        assert_eq!(model.store.values(), out.best_values);
        let bad = TrainConfig { target_accuracy: 1.5, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn best_checkpoint_is_argmin_of_log() {
        let mut model = tiny_model(2);
        let splits = DatasetSplit { train: copy_samples(32, 5), dev: copy_samples(8, 6) };
        let cfg = TrainConfig {
            lr_omega: 3e-2,
            eval_every: 2,
            batch_size: 8,
            max_epochs: 3,
            schedule: LrSchedule::Constant,
            ..TrainConfig::default()
        };
        let out = train_loop(&mut model, &splits, &cfg).unwrap();
        let argmin = out
            .log
            .iter()
            .min_by(|a, b| a.dev_ppl.partial_cmp(&b.dev_ppl).unwrap())
            .unwrap();
        assert_eq!(out.best_step, argmin.step);
        assert_eq!(model.store.values(), out.best_values);
        let m = evaluate(&model, &splits.dev).unwrap();
        assert_eq!(m.ppl, out.best_dev_ppl);
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig { warmup_frac: 0.1, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..100).map(|s| cfg.lr_at(1.0, s, 100)).collect();
        assert!((lrs[9] - 1.0).abs() < 1e-12);
        assert!(lrs[0] < lrs[5] && lrs[50] > lrs[90]);
        assert!(lrs.iter().all(|&v| v > 0.0));
    }
}
