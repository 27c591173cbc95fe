//! The adapted model: frozen backbone, one expert set and one router per
//! layer, all parameters in a single [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ActiveExpert, AdapterHook, Backbone, BackboneConfig, ModuleId};
use crate::error::{Error, Result};
use crate::lora::{check_rank, init_expert, Gate, LayerExpertSet};
use crate::numcore::{Graph, Group, ParamStore, Var};
use crate::router::{LayerRoute, LoraRouter, RouterConfig, RoutingDecision, N_MOD};

/// How experts are chosen for each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    /// Router picks the top-k experts per prompt.
    Routed,
    /// All seven experts always active at gate 1 (plain LoRA control).
    AllExperts,
}

impl AdapterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterMode::Routed => "routed",
            AdapterMode::AllExperts => "all-experts",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "routed" => Some(AdapterMode::Routed),
            "all-experts" => Some(AdapterMode::AllExperts),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub lora_rank: usize,
    pub router: RouterConfig,
    pub adapters: AdapterMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            lora_rank: 8,
            router: RouterConfig::default(),
            adapters: AdapterMode::Routed,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.router.validate()?;
        for m in ModuleId::ALL {
            let (d_in, d_out) = m.dims(&self.backbone);
            check_rank(self.lora_rank, d_in, d_out)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MiLoraModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub experts: Vec<LayerExpertSet>,
    pub routers: Vec<LoraRouter>,
}

impl MiLoraModel {
    /// Builds every parameter from `seed`, in a fixed registration order:
    /// backbone, experts layer by layer, then routers.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(config.backbone.clone(), &mut store, &mut rng)?;
        let mut experts = Vec::with_capacity(config.backbone.n_layers);
        for l in 0..config.backbone.n_layers {
            let mut set = Vec::with_capacity(N_MOD);
            for m in ModuleId::ALL {
                let dims = m.dims(&config.backbone);
                set.push(init_expert(&mut store, &format!("layers.{l}"), m, dims, config.lora_rank, &mut rng)?);
            }
            experts.push(LayerExpertSet {
                experts: set.try_into().expect("seven experts"),
            });
        }
        let mut routers = Vec::with_capacity(config.backbone.n_layers);
        for l in 0..config.backbone.n_layers {
            routers.push(LoraRouter::build(
                &mut store,
                l,
                config.backbone.n_layers,
                config.backbone.d_model,
                &config.router,
                &mut rng,
            )?);
        }
        Ok(MiLoraModel {
            config,
            store,
            backbone,
            experts,
            routers,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.backbone.layers.len()
    }

    pub fn lora_param_count(&self) -> usize {
        self.experts.iter().map(LayerExpertSet::param_count).sum()
    }

    pub fn router_param_count(&self) -> usize {
        match self.config.adapters {
            AdapterMode::Routed => self.routers.iter().map(|r| r.param_count(&self.store)).sum(),
            AdapterMode::AllExperts => 0,
        }
    }

    pub fn tunable_param_count(&self) -> usize {
        self.lora_param_count() + self.router_param_count()
    }

    pub fn count_group(&self, group: Group) -> usize {
        self.store.count(|p| p.trainable && p.group() == group)
    }

    /// Decision with every expert active at gate 1.
    pub fn all_experts_decision(&self) -> RoutingDecision {
        RoutingDecision {
            layers: (0..self.n_layers())
                .map(|_| LayerRoute {
                    selected: (0..N_MOD).collect(),
                    gates: vec![1.0; N_MOD],
                    probs: vec![1.0 / N_MOD as f64; N_MOD],
                })
                .collect(),
        }
    }

    /// Experts named by one layer's route, with constant gates.
    pub fn active_from_route(&self, layer: usize, route: &LayerRoute) -> Vec<ActiveExpert> {
        route
            .selected
            .iter()
            .zip(&route.gates)
            .map(|(&m, &gate)| ActiveExpert {
                expert: self.experts[layer].experts[m],
                gate: Gate::Const(gate),
            })
            .collect()
    }
}

/// Evaluates each layer's router on the prompt rows of `H^l` and applies
/// the selected experts in the same pass.
pub struct RoutingHook<'m> {
    model: &'m MiLoraModel,
    prompt_rows: usize,
    k: usize,
    pub routes: Vec<LayerRoute>,
    /// Router distributions, one `[1×N_MOD]` node per layer.
    pub probs: Vec<Var>,
    pub router_evals: u64,
}

impl<'m> RoutingHook<'m> {
    /// `prompt_rows` rows starting at the top of the forward input are the
    /// routing prompt; later rows (training targets) are not pooled.
    pub fn new(model: &'m MiLoraModel, prompt_rows: usize) -> Self {
        RoutingHook {
            model,
            prompt_rows,
            k: model.config.router.k,
            routes: Vec::new(),
            probs: Vec::new(),
            router_evals: 0,
        }
    }

    pub fn decision(&self) -> RoutingDecision {
        RoutingDecision {
            layers: self.routes.clone(),
        }
    }
}

impl AdapterHook for RoutingHook<'_> {
    fn before_layer(&mut self, g: &mut Graph, layer: usize, hidden: Var) -> Result<Vec<ActiveExpert>> {
        let model = self.model;
        if model.config.adapters == AdapterMode::AllExperts {
            let route = &model.all_experts_decision().layers[layer];
            self.routes.push(route.clone());
            return Ok(model.active_from_route(layer, route));
        }
        let rows = g.value(hidden).rows();
        if self.prompt_rows == 0 || self.prompt_rows > rows {
            return Err(Error::contract(format!(
                "routing prompt of {} rows in a forward of {rows}",
                self.prompt_rows
            )));
        }
        let states = if self.prompt_rows == rows {
            hidden
        } else {
            let idx: Vec<usize> = (0..self.prompt_rows).collect();
            g.select_rows(hidden, &idx)?
        };
        let router = &model.routers[layer];
        let res = router.route(g, states, self.k, model.config.router.gating)?;
        self.router_evals += 1;
        let active = res
            .route
            .selected
            .iter()
            .zip(&res.gates)
            .map(|(&m, &gate)| ActiveExpert {
                expert: model.experts[layer].experts[m],
                gate,
            })
            .collect();
        self.probs.push(res.probs);
        self.routes.push(res.route);
        Ok(active)
    }
}

/// Applies a fixed decision; never evaluates a router.
pub struct DecisionHook<'m> {
    model: &'m MiLoraModel,
    decision: &'m RoutingDecision,
}

impl<'m> DecisionHook<'m> {
    pub fn new(model: &'m MiLoraModel, decision: &'m RoutingDecision) -> Self {
        DecisionHook { model, decision }
    }
}

impl AdapterHook for DecisionHook<'_> {
    fn before_layer(&mut self, _: &mut Graph, layer: usize, _: Var) -> Result<Vec<ActiveExpert>> {
        let route = self
            .decision
            .layers
            .get(layer)
            .ok_or_else(|| Error::contract(format!("routing decision has no entry for layer {layer}")))?;
        Ok(self.model.active_from_route(layer, route))
    }
}
