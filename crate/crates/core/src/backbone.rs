//! A small LLaMA-style decoder: RMS-norm, rotary attention and a gated-SiLU
//! feed-forward, with the seven per-layer linear modules exposed so LoRA
//! experts can attach to them.
//!
//! The forward pass hands the residual stream entering each layer to an
//! [`AdapterHook`] before the layer runs. The hook returns which experts to
//! apply inside that layer, which is how routers see `H^l` and act on it in
//! the same pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lora::{lora_forward, Gate, LoraExpert};
use crate::numcore::{Graph, Group, ParamId, ParamStore, RopeSpec, Tensor, Var};

/// The linear modules of a Transformer layer, in routing-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleId {
    Q,
    K,
    V,
    O,
    G,
    U,
    D,
}

impl ModuleId {
    pub const COUNT: usize = 7;
    pub const ALL: [ModuleId; 7] = [
        ModuleId::Q,
        ModuleId::K,
        ModuleId::V,
        ModuleId::O,
        ModuleId::G,
        ModuleId::U,
        ModuleId::D,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ModuleId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleId::Q => "q",
            ModuleId::K => "k",
            ModuleId::V => "v",
            ModuleId::O => "o",
            ModuleId::G => "g",
            ModuleId::U => "u",
            ModuleId::D => "d",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModuleId::Q => "Q",
            ModuleId::K => "K",
            ModuleId::V => "V",
            ModuleId::O => "O",
            ModuleId::G => "G",
            ModuleId::U => "U",
            ModuleId::D => "D",
        }
    }

    /// `(d_in, d_out)` of the module's weight.
    pub fn dims(self, cfg: &BackboneConfig) -> (usize, usize) {
        match self {
            ModuleId::Q | ModuleId::K | ModuleId::V | ModuleId::O => (cfg.d_model, cfg.d_model),
            ModuleId::G | ModuleId::U => (cfg.d_model, cfg.d_ffn),
            ModuleId::D => (cfg.d_ffn, cfg.d_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Linear weights are drawn with std `init_scale / sqrt(d_in)`.
    pub init_scale: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 344,
            max_seq_len: 256,
            rope_base: 10000.0,
            norm_eps: 1e-6,
            init_scale: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("backbone.{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::config("rotary embeddings need an even head dimension"));
        }
        if !(self.rope_base > 0.0 && self.norm_eps > 0.0 && self.init_scale > 0.0) {
            return Err(Error::config("rope_base, norm_eps and init_scale must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters of the frozen model.
    pub fn param_count(&self) -> usize {
        let per_layer: usize = ModuleId::ALL
            .iter()
            .map(|m| {
                let (a, b) = m.dims(self);
                a * b + b
            })
            .sum::<usize>()
            + 2 * self.d_model;
        2 * self.vocab_size * self.d_model + self.n_layers * per_layer + self.d_model
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearModule {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub modules: [LinearModule; ModuleId::COUNT],
    pub attn_norm: ParamId,
    pub ffn_norm: ParamId,
}

impl TransformerLayer {
    pub fn module(&self, m: ModuleId) -> LinearModule {
        self.modules[m.index()]
    }
}

/// An expert to apply inside one layer during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ActiveExpert {
    pub expert: LoraExpert,
    pub gate: Gate,
}

/// Called with the residual stream `H^l` right before layer `l` runs.
pub trait AdapterHook {
    fn before_layer(&mut self, g: &mut Graph, layer: usize, hidden: Var) -> Result<Vec<ActiveExpert>>;
}

/// Frozen-backbone forward.
pub struct NoAdapters;

impl AdapterHook for NoAdapters {
    fn before_layer(&mut self, _: &mut Graph, _: usize, _: Var) -> Result<Vec<ActiveExpert>> {
        Ok(Vec::new())
    }
}

/// Per-layer rotated keys and values for every processed position.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<Option<(Tensor, Tensor)>>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        KvCache {
            layers: vec![None; n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layer(&self, l: usize) -> Option<&(Tensor, Tensor)> {
        self.layers[l].as_ref()
    }
}

pub struct ForwardOutput {
    /// `[n×vocab]` logits for the new positions.
    pub logits: Var,
    /// Residual stream entering each layer.
    pub hidden: Vec<Var>,
    /// Multiply-accumulates spent in LoRA paths.
    pub adapter_macs: u64,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embed: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: ParamId,
    pub lm_head: ParamId,
}

impl Backbone {
    /// Registers frozen, randomly initialized weights in `store`.
    pub fn build<R: Rng>(config: BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut gaussian = |store: &mut ParamStore, name: String, rows: usize, cols: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            store.add(name, Tensor::from_parts(rows, cols, data), Group::Omega, false)
        };
        let embed = gaussian(store, "embed".into(), config.vocab_size, d, 1.0);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut modules = Vec::with_capacity(ModuleId::COUNT);
            for m in ModuleId::ALL {
                let (d_in, d_out) = m.dims(&config);
                let std = config.init_scale / (d_in as f64).sqrt();
                let weight = gaussian(store, format!("layers.{l}.{}.weight", m.name()), d_in, d_out, std);
                let bias = store.add(
                    format!("layers.{l}.{}.bias", m.name()),
                    Tensor::zeros(1, d_out),
                    Group::Omega,
                    false,
                );
                modules.push(LinearModule { weight, bias });
            }
            let attn_norm = store.add(format!("layers.{l}.attn_norm"), Tensor::full(1, d, 1.0), Group::Omega, false);
            let ffn_norm = store.add(format!("layers.{l}.ffn_norm"), Tensor::full(1, d, 1.0), Group::Omega, false);
            layers.push(TransformerLayer {
                modules: modules.try_into().expect("seven modules"),
                attn_norm,
                ffn_norm,
            });
        }
        let final_norm = store.add("final_norm", Tensor::full(1, d, 1.0), Group::Omega, false);
        let lm_head = gaussian(store, "lm_head".into(), d, config.vocab_size, 1.0 / (d as f64).sqrt());
        Ok(Backbone {
            config,
            embed,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed];
        for layer in &self.layers {
            for m in &layer.modules {
                ids.push(m.weight);
                ids.push(m.bias);
            }
            ids.push(layer.attn_norm);
            ids.push(layer.ffn_norm);
        }
        ids.push(self.final_norm);
        ids.push(self.lm_head);
        ids
    }

    pub fn check_tokens(&self, tokens: &[usize], already: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::input("empty token sequence"));
        }
        if already + tokens.len() > self.config.max_seq_len {
            return Err(Error::input(format!(
                "sequence length {} exceeds max_seq_len {}",
                already + tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs `tokens` through the model. With a cache, the tokens continue
    /// the cached sequence and their keys/values are appended to it.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        mut cache: Option<&mut KvCache>,
        hook: &mut dyn AdapterHook,
    ) -> Result<ForwardOutput> {
        let pos0 = cache.as_ref().map_or(0, |c| c.len());
        self.check_tokens(tokens, pos0)?;
        let cfg = &self.config;
        let (dh, heads) = (cfg.head_dim(), cfg.n_heads);
        let rope = RopeSpec {
            pos0,
            n_heads: heads,
            base: cfg.rope_base,
        };
        let embed = g.param(self.embed);
        let mut x = g.select_rows(embed, tokens)?;
        let mut hidden = Vec::with_capacity(self.layers.len());
        let mut macs = 0u64;

        for (l, layer) in self.layers.iter().enumerate() {
            hidden.push(x);
            let active = hook.before_layer(g, l, x)?;
            let mut linear = |g: &mut Graph, m: ModuleId, input: Var| -> Result<Var> {
                let lm = layer.module(m);
                let (w, b) = (g.param(lm.weight), g.param(lm.bias));
                let adapter = active
                    .iter()
                    .find(|a| a.expert.module == m)
                    .map(|a| (&a.expert, a.gate));
                let (y, spent) = lora_forward(g, input, w, b, adapter)?;
                macs += spent;
                Ok(y)
            };

            let attn_w = g.param(layer.attn_norm);
            let h = g.rms_norm(x, attn_w, cfg.norm_eps)?;
            let q = linear(g, ModuleId::Q, h)?;
            let k = linear(g, ModuleId::K, h)?;
            let v = linear(g, ModuleId::V, h)?;
            let q = g.rope(q, rope)?;
            let k = g.rope(k, rope)?;
            let (keys, values) = match cache.as_deref() {
                Some(c) => match c.layer(l) {
                    Some((ck, cv)) => {
                        let (ck, cv) = (g.constant(ck.clone()), g.constant(cv.clone()));
                        (g.concat_rows(&[ck, k])?, g.concat_rows(&[cv, v])?)
                    }
                    None => (k, v),
                },
                None => (k, v),
            };
            if let Some(c) = cache.as_deref_mut() {
                c.layers[l] = Some((g.value(keys).clone(), g.value(values).clone()));
            }
            let scale = 1.0 / (dh as f64).sqrt();
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(keys, hd * dh, dh)?;
                let vh = g.slice_cols(values, hd * dh, dh)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale)?;
                let probs = g.causal_softmax(scores, pos0)?;
                head_out.push(g.matmul(probs, vh)?);
            }
            let attn = g.concat_cols(&head_out)?;
            let o = linear(g, ModuleId::O, attn)?;
            x = g.add(x, o)?;

            let ffn_w = g.param(layer.ffn_norm);
            let h2 = g.rms_norm(x, ffn_w, cfg.norm_eps)?;
            let gate = linear(g, ModuleId::G, h2)?;
            let up = linear(g, ModuleId::U, h2)?;
            let act = g.silu(gate)?;
            let mixed = g.mul(act, up)?;
            let down = linear(g, ModuleId::D, mixed)?;
            x = g.add(x, down)?;
        }
        if let Some(c) = cache {
            c.len += tokens.len();
        }
        let fw = g.param(self.final_norm);
        let xn = g.rms_norm(x, fw, cfg.norm_eps)?;
        let head = g.param(self.lm_head);
        let logits = g.matmul(xn, head)?;
        Ok(ForwardOutput {
            logits,
            hidden,
            adapter_macs: macs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ParamStore, Backbone) {
        let cfg = BackboneConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 24,
            max_seq_len: 32,
            ..BackboneConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::build(cfg, &mut store, &mut rng).unwrap();
        (store, bb)
    }

    fn logits(store: &ParamStore, bb: &Backbone, tokens: &[usize]) -> Tensor {
        let mut g = Graph::inference(store);
        let out = bb.forward(&mut g, tokens, None, &mut NoAdapters).unwrap();
        g.value(out.logits).clone()
    }

    #[test]
    fn module_shapes() {
        let (store, bb) = tiny();
        let l = &bb.layers[0];
        assert_eq!(store.value(l.module(ModuleId::Q).weight).shape(), &[16, 16]);
        assert_eq!(store.value(l.module(ModuleId::G).weight).shape(), &[16, 24]);
        assert_eq!(store.value(l.module(ModuleId::D).weight).shape(), &[24, 16]);
        let total: usize = bb.param_ids().iter().map(|&id| store.value(id).numel()).sum();
        assert_eq!(total, bb.config.param_count());
    }

    #[test]
    fn first_hidden_state_is_the_embedding() {
        let (store, bb) = tiny();
        let mut g = Graph::inference(&store);
        let out = bb.forward(&mut g, &[4], None, &mut NoAdapters).unwrap();
        assert_eq!(g.value(out.hidden[0]).data(), store.value(bb.embed).row_slice(4));
    }

    #[test]
    fn causal() {
        let (store, bb) = tiny();
        let a = logits(&store, &bb, &[1, 2, 3, 4, 5]);
        let b = logits(&store, &bb, &[1, 2, 3, 9, 0]);
        for t in 0..3 {
            assert_eq!(a.row_slice(t), b.row_slice(t));
        }
        assert_ne!(a.row_slice(3), b.row_slice(3));
    }

    #[test]
    fn cached_decode_matches_recompute() {
        let (store, bb) = tiny();
        let seq = [3usize, 1, 4, 1, 5, 9, 2, 6, 5, 3];
        let mut cache = KvCache::new(2);
        {
            let mut g = Graph::inference(&store);
            bb.forward(&mut g, &seq[..4], Some(&mut cache), &mut NoAdapters).unwrap();
        }
        for t in 4..seq.len() {
            let mut g = Graph::inference(&store);
            let out = bb.forward(&mut g, &seq[t..t + 1], Some(&mut cache), &mut NoAdapters).unwrap();
            let full = logits(&store, &bb, &seq[..=t]);
            let step = g.value(out.logits);
            assert!(step.max_abs_diff(&Tensor::row(full.row_slice(t).to_vec())) < 1e-10);
            assert_eq!(cache.len(), t + 1);
        }
    }

    #[test]
    fn input_errors() {
        let (store, bb) = tiny();
        let mut g = Graph::inference(&store);
        assert!(matches!(bb.forward(&mut g, &[11], None, &mut NoAdapters), Err(Error::Input(_))));
        assert!(matches!(bb.forward(&mut g, &[], None, &mut NoAdapters), Err(Error::Input(_))));
        assert!(matches!(bb.forward(&mut g, &[0; 33], None, &mut NoAdapters), Err(Error::Input(_))));
    }

    #[test]
    fn config_validation() {
        let bad = BackboneConfig { d_model: 10, n_heads: 4, ..BackboneConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(BackboneConfig::default().validate().is_ok());
    }
}
