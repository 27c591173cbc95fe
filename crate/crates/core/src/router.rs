//! Prompt-aware LoRA router.
//!
//! Each layer owns one router. It pools the prompt's hidden states into a
//! single vector, passes that through an activation (a learnable rational
//! function by default), projects to one logit per module, applies softmax
//! and keeps the top-k experts. The result is a [`LayerRoute`]; a full
//! [`RoutingDecision`] is computed once per prompt and reused for every
//! generated token.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::ModuleId;
use crate::error::{Error, Result};
use crate::lora::Gate;
use crate::numcore::{gelu, rational_parts, DenominatorForm, Graph, Group, ParamId, ParamStore, Tensor, Var};

pub const N_MOD: usize = ModuleId::COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolerKind {
    LastToken,
    Mean,
    Max,
    SelfAttention,
}

impl PoolerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolerKind::LastToken => "last",
            PoolerKind::Mean => "mean",
            PoolerKind::Max => "max",
            PoolerKind::SelfAttention => "self-attention",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "last" => Some(PoolerKind::LastToken),
            "mean" => Some(PoolerKind::Mean),
            "max" => Some(PoolerKind::Max),
            "self-attention" => Some(PoolerKind::SelfAttention),
            _ => None,
        }
    }
}

/// A built pooler. The self-attention variant carries its `[d×1]` query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooler {
    LastToken,
    Mean,
    Max,
    SelfAttention(ParamId),
}

impl Pooler {
    /// Reduces `[n_p×d]` prompt states to `[1×d]`.
    pub fn pool(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let n = g.value(h).rows();
        if n == 0 {
            return Err(Error::input("pooling an empty sequence"));
        }
        match self {
            Pooler::LastToken => g.select_rows(h, &[n - 1]),
            Pooler::Mean => g.mean_rows(h),
            Pooler::Max => g.max_rows(h),
            Pooler::SelfAttention(w_sa) => {
                let w = g.param(*w_sa);
                let scores = g.matmul(h, w)?;
                let attn = g.softmax(scores, 0)?;
                let attn_t = g.transpose(attn)?;
                g.matmul(attn_t, h)
            }
        }
    }
}

/// Router activation choice. The two depth-split variants use the first
/// activation for the shallower half of the layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Rational,
    Gelu,
    ReluThenGelu,
    GeluThenRelu,
}

impl ActivationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Rational => "rational",
            ActivationKind::Gelu => "gelu",
            ActivationKind::ReluThenGelu => "relu-then-gelu",
            ActivationKind::GeluThenRelu => "gelu-then-relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rational" => Some(ActivationKind::Rational),
            "gelu" => Some(ActivationKind::Gelu),
            "relu-then-gelu" => Some(ActivationKind::ReluThenGelu),
            "gelu-then-relu" => Some(ActivationKind::GeluThenRelu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatingMode {
    /// Selected experts run at full strength.
    Binary,
    /// Selected experts are scaled by their renormalized probabilities.
    Weighted,
}

impl GatingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GatingMode::Binary => "binary",
            GatingMode::Weighted => "weighted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "binary" => Some(GatingMode::Binary),
            "weighted" => Some(GatingMode::Weighted),
            _ => None,
        }
    }
}

pub fn denominator_as_str(form: DenominatorForm) -> &'static str {
    match form {
        DenominatorForm::AbsOfSum => "abs-of-sum",
        DenominatorForm::SumOfAbs => "sum-of-abs",
    }
}

pub fn parse_denominator(s: &str) -> Option<DenominatorForm> {
    match s {
        "abs-of-sum" => Some(DenominatorForm::AbsOfSum),
        "sum-of-abs" => Some(DenominatorForm::SumOfAbs),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterConfig {
    pub k: usize,
    pub pooler: PoolerKind,
    pub gating: GatingMode,
    pub activation: ActivationKind,
    pub rational_m: usize,
    pub rational_n: usize,
    pub denominator: DenominatorForm,
    pub init_std: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            k: 3,
            pooler: PoolerKind::SelfAttention,
            gating: GatingMode::Weighted,
            activation: ActivationKind::Rational,
            rational_m: 6,
            rational_n: 5,
            denominator: DenominatorForm::AbsOfSum,
            init_std: 0.02,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        check_k(self.k)?;
        if self.rational_n == 0 {
            return Err(Error::config("rational denominator order must be at least 1"));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::config("router.init_std must be nonnegative"));
        }
        Ok(())
    }
}

pub fn check_k(k: usize) -> Result<()> {
    if k == 0 || k > N_MOD {
        return Err(Error::config(format!("k must be in 1..={N_MOD}, got {k}")));
    }
    Ok(())
}

/// `Ra(x) = P(x) / (1 + |S(x)|)` with learnable coefficients (group Theta).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RationalActivation {
    pub a: ParamId,
    pub b: ParamId,
    pub form: DenominatorForm,
}

impl RationalActivation {
    pub fn eval(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (a, b) = (g.param(self.a), g.param(self.b));
        g.rational(x, a, b, self.form)
    }

    /// Pointwise evaluation outside a graph.
    pub fn eval_scalar(&self, store: &ParamStore, x: f64) -> f64 {
        let p = rational_parts(x, store.value(self.a).data(), store.value(self.b).data(), self.form);
        p.num / p.den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterActivation {
    Rational(RationalActivation),
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRoute {
    /// Selected module indices, ascending.
    pub selected: Vec<usize>,
    /// Gate for each selected index, same order.
    pub gates: Vec<f64>,
    /// Full router distribution over the seven modules.
    pub probs: Vec<f64>,
}

impl LayerRoute {
    pub fn gate_for(&self, module: usize) -> Option<f64> {
        self.selected.iter().position(|&m| m == module).map(|i| self.gates[i])
    }
}

/// Per-layer routes for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub layers: Vec<LayerRoute>,
}

/// Output of one router evaluation inside a graph.
pub struct RouteResult {
    pub probs: Var,
    pub route: LayerRoute,
    /// Gate per selected index; differentiable in weighted mode.
    pub gates: Vec<Gate>,
}

/// Indices of the `k` largest probabilities, ties to the lowest index,
/// returned in ascending index order.
pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&i, &j| probs[j].total_cmp(&probs[i]).then(i.cmp(&j)));
    let mut sel = order[..k.min(probs.len())].to_vec();
    sel.sort_unstable();
    sel
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct LoraRouter {
    pub layer: usize,
    pub w_r: ParamId,
    pub activation: RouterActivation,
    pub pooler: Pooler,
}

impl LoraRouter {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        layer: usize,
        n_layers: usize,
        d_model: usize,
        cfg: &RouterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut gaussian = |rows: usize, cols: usize| {
            let data = if cfg.init_std > 0.0 {
                let normal = Normal::new(0.0, cfg.init_std).expect("positive std");
                (0..rows * cols).map(|_| normal.sample(rng)).collect()
            } else {
                vec![0.0; rows * cols]
            };
            Tensor::from_parts(rows, cols, data)
        };
        let pooler = match cfg.pooler {
            PoolerKind::LastToken => Pooler::LastToken,
            PoolerKind::Mean => Pooler::Mean,
            PoolerKind::Max => Pooler::Max,
            PoolerKind::SelfAttention => {
                let t = gaussian(d_model, 1);
                Pooler::SelfAttention(store.add(format!("routers.{layer}.w_sa"), t, Group::Omega, true))
            }
        };
        let w_r = store.add(format!("routers.{layer}.w_r"), gaussian(d_model, N_MOD), Group::Omega, true);
        let shallow = 2 * layer < n_layers;
        let activation = match cfg.activation {
            ActivationKind::Rational => {
                let fit = gelu_fit(cfg.rational_m, cfg.rational_n, cfg.denominator)?;
                let a = store.add(format!("routers.{layer}.rational_a"), Tensor::row(fit.a.clone()), Group::Theta, true);
                let b = store.add(format!("routers.{layer}.rational_b"), Tensor::row(fit.b.clone()), Group::Theta, true);
                RouterActivation::Rational(RationalActivation { a, b, form: cfg.denominator })
            }
            ActivationKind::Gelu => RouterActivation::Gelu,
            ActivationKind::ReluThenGelu if shallow => RouterActivation::Relu,
            ActivationKind::ReluThenGelu => RouterActivation::Gelu,
            ActivationKind::GeluThenRelu if shallow => RouterActivation::Gelu,
            ActivationKind::GeluThenRelu => RouterActivation::Relu,
        };
        Ok(LoraRouter {
            layer,
            w_r,
            activation,
            pooler,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_r];
        if let Pooler::SelfAttention(w) = self.pooler {
            ids.push(w);
        }
        if let RouterActivation::Rational(r) = self.activation {
            ids.push(r.a);
            ids.push(r.b);
        }
        ids
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.value(id).numel()).sum()
    }

    pub fn activate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match &self.activation {
            RouterActivation::Rational(r) => r.eval(g, x),
            RouterActivation::Gelu => g.gelu(x),
            RouterActivation::Relu => g.relu(x),
        }
    }

    /// Router distribution `softmax(act(pool(H)) · W_r)`, `[1×N_MOD]`.
    pub fn probabilities(&self, g: &mut Graph, prompt_states: Var) -> Result<Var> {
        let pooled = self.pooler.pool(g, prompt_states)?;
        self.probabilities_from_pooled(g, pooled)
    }

    pub fn probabilities_from_pooled(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        let act = self.activate(g, pooled)?;
        let w = g.param(self.w_r);
        let logits = g.matmul(act, w)?;
        g.softmax(logits, 1)
    }

    pub fn route(&self, g: &mut Graph, prompt_states: Var, k: usize, mode: GatingMode) -> Result<RouteResult> {
        check_k(k)?;
        let probs = self.probabilities(g, prompt_states)?;
        select(g, probs, k, mode)
    }
}

/// Top-k selection and gating from a `[1×N_MOD]` probability node.
pub fn select(g: &mut Graph, probs: Var, k: usize, mode: GatingMode) -> Result<RouteResult> {
    check_k(k)?;
    let p = g.value(probs).data().to_vec();
    let selected = top_k(&p, k);
    let (gates, gate_vals) = match mode {
        GatingMode::Binary => (vec![Gate::Const(1.0); k], vec![1.0; k]),
        GatingMode::Weighted => {
            let picked = g.select_cols(probs, &selected)?;
            let total = g.sum(picked)?;
            let inv = g.recip(total)?;
            let norm = g.scale_by(picked, inv)?;
            let vals = g.value(norm).data().to_vec();
            let mut gates = Vec::with_capacity(k);
            for i in 0..k {
                gates.push(Gate::Var(g.select_cols(norm, &[i])?));
            }
            (gates, vals)
        }
    };
    Ok(RouteResult {
        probs,
        route: LayerRoute {
            selected,
            gates: gate_vals,
            probs: p,
        },
        gates,
    })
}

/// Argmax histogram `f` (a constant) and mean probability `p̂` (a node)
/// over a batch of router distributions for one layer.
pub fn load_balance_stats(g: &mut Graph, probs: &[Var]) -> Result<(Vec<f64>, Var)> {
    if probs.is_empty() {
        return Err(Error::contract("load-balance statistics over an empty batch"));
    }
    let values: Vec<Vec<f64>> = probs.iter().map(|&p| g.value(p).data().to_vec()).collect();
    let f = assignment_fractions(&values);
    let stacked = g.concat_rows(probs)?;
    let p_hat = g.mean_rows(stacked)?;
    Ok((f, p_hat))
}

/// Fraction of rows whose argmax (lowest index on ties) is each expert.
pub fn assignment_fractions(probs: &[Vec<f64>]) -> Vec<f64> {
    let n = probs.first().map_or(N_MOD, Vec::len);
    let mut f = vec![0.0; n];
    for p in probs {
        f[argmax(p)] += 1.0;
    }
    f.iter_mut().for_each(|v| *v /= probs.len() as f64);
    f
}

// ---------------------------------------------------------------------------
// GeLU-approximating initialization

#[derive(Debug, Clone, PartialEq)]
pub struct RationalFit {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Max |Ra − GeLU| over the fit grid.
    pub max_residual: f64,
    pub iterations: usize,
}

/// Fit grid: `[-3, 3]` in steps of 0.01.
pub fn fit_grid() -> Vec<f64> {
    (0..=600).map(|i| -3.0 + 0.01 * i as f64).collect()
}

fn sign0(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum()
    }
}

fn rational_row(x: f64, a: &[f64], b: &[f64], form: DenominatorForm) -> (f64, Vec<f64>) {
    // value and gradient w.r.t. (a, b)
    let p = rational_parts(x, a, b, form);
    let mut grad = Vec::with_capacity(a.len() + b.len());
    let mut pw = 1.0;
    for _ in a {
        grad.push(pw / p.den);
        pw *= x;
    }
    let mut pw = x;
    for &bi in b {
        let sgn = match form {
            DenominatorForm::AbsOfSum => sign0(p.den_poly),
            DenominatorForm::SumOfAbs => sign0(bi * pw),
        };
        grad.push(-p.num / (p.den * p.den) * sgn * pw);
        pw *= x;
    }
    (p.num / p.den, grad)
}

/// Damped least-squares fit of `Ra` to exact GeLU on [`fit_grid`].
///
/// A linearized solve of `P(x) − GeLU(x)·S(x) = GeLU(x)` seeds a
/// Levenberg–Marquardt refinement of the true residual. Deterministic.
pub fn fit_gelu_init(m: usize, n: usize, form: DenominatorForm) -> Result<RationalFit> {
    if n == 0 {
        return Err(Error::Init("denominator order must be at least 1".into()));
    }
    let xs = fit_grid();
    let ys: Vec<f64> = xs.iter().map(|&x| gelu(x)).collect();
    let np = m + 1 + n;

    let mut lin = DMatrix::<f64>::zeros(xs.len(), np);
    for (i, (&x, &y)) in xs.iter().zip(&ys).enumerate() {
        let mut pw = 1.0;
        for j in 0..=m {
            lin[(i, j)] = pw;
            pw *= x;
        }
        let mut pw = x;
        for j in 0..n {
            lin[(i, m + 1 + j)] = -y * pw;
            pw *= x;
        }
    }
    let rhs = DVector::from_vec(ys.clone());
    let seed = lin
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Init(format!("linearized rational fit failed: {e}")))?;
    let mut theta: Vec<f64> = seed.iter().copied().collect();

    let sse = |theta: &[f64]| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let p = rational_parts(x, &theta[..=m], &theta[m + 1..], form);
                (p.num / p.den - y).powi(2)
            })
            .sum()
    };
    let mut cost = sse(&theta);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    for it in 0..2000 {
        iterations = it + 1;
        let mut jtj = DMatrix::<f64>::zeros(np, np);
        let mut jtr = DVector::<f64>::zeros(np);
        for (&x, &y) in xs.iter().zip(&ys) {
            let (v, grad) = rational_row(x, &theta[..=m], &theta[m + 1..], form);
            let r = v - y;
            for i in 0..np {
                jtr[i] += grad[i] * r;
                for j in 0..np {
                    jtj[(i, j)] += grad[i] * grad[j];
                }
            }
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut damped = jtj.clone();
            for i in 0..np {
                damped[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = damped.clone().cholesky().map(|c| c.solve(&(-&jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            let c = sse(&cand);
            if c.is_finite() && c < cost {
                let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                theta = cand;
                cost = c;
                lambda = (lambda * 0.3).max(1e-15);
                improved = rel > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let a = theta[..=m].to_vec();
    let b = theta[m + 1..].to_vec();
    let max_residual = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| {
            let p = rational_parts(x, &a, &b, form);
            (p.num / p.den - y).abs()
        })
        .fold(0.0, f64::max);
    if !max_residual.is_finite() || max_residual > 0.05 {
        return Err(Error::Init(format!(
            "GeLU fit (m={m}, n={n}) did not converge: max residual {max_residual:e} after {iterations} iterations"
        )));
    }
    Ok(RationalFit {
        a,
        b,
        max_residual,
        iterations,
    })
}

/// Cached fit for the orders in use; the fit is deterministic.
pub fn gelu_fit(m: usize, n: usize, form: DenominatorForm) -> Result<RationalFit> {
    static DEFAULT: OnceLock<std::result::Result<RationalFit, String>> = OnceLock::new();
    if (m, n, form) == (6, 5, DenominatorForm::AbsOfSum) {
        return DEFAULT
            .get_or_init(|| fit_gelu_init(6, 5, DenominatorForm::AbsOfSum).map_err(|e| e.to_string()))
            .clone()
            .map_err(Error::Init);
    }
    fit_gelu_init(m, n, form)
}
