//! Routing reports over a set of prompts.

use crate::backbone::ModuleId;
use crate::error::{Error, Result};
use crate::model::{MiLoraModel, RoutingHook};
use crate::numcore::Graph;
use crate::router::{RoutingDecision, N_MOD};

/// Routes one prompt without generating anything.
pub fn route_prompt(model: &MiLoraModel, prompt: &[usize]) -> Result<RoutingDecision> {
    if prompt.is_empty() {
        return Err(Error::input("empty prompt"));
    }
    let mut g = Graph::inference(&model.store);
    let mut hook = RoutingHook::new(model, prompt.len());
    model.backbone.forward(&mut g, prompt, None, &mut hook)?;
    Ok(hook.decision())
}

/// How often each module's expert was selected, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDistribution {
    pub prompts: usize,
    pub frequency: Vec<[f64; N_MOD]>,
}

pub const DISTRIBUTION_HEADER: &str = "layer,module,frequency";

impl ExpertDistribution {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{DISTRIBUTION_HEADER}\n");
        for (l, row) in self.frequency.iter().enumerate() {
            for m in ModuleId::ALL {
                out.push_str(&format!("{l},{},{:.6}\n", m.label(), row[m.index()]));
            }
        }
        out
    }
}

pub fn expert_distribution(model: &MiLoraModel, prompts: &[Vec<usize>]) -> Result<ExpertDistribution> {
    if prompts.is_empty() {
        return Err(Error::input("no prompts to route"));
    }
    let mut counts = vec![[0usize; N_MOD]; model.n_layers()];
    for p in prompts {
        for (l, route) in route_prompt(model, p)?.layers.iter().enumerate() {
            for &m in &route.selected {
                counts[l][m] += 1;
            }
        }
    }
    let n = prompts.len() as f64;
    Ok(ExpertDistribution {
        prompts: prompts.len(),
        frequency: counts.iter().map(|c| c.map(|v| v as f64 / n)).collect(),
    })
}

pub const ROUTE_DUMP_HEADER: &str = "prompt,layer,module,prob,selected,gate";

/// One row per prompt, layer and module.
pub fn route_dump(model: &MiLoraModel, prompts: &[Vec<usize>]) -> Result<String> {
    let mut out = format!("{ROUTE_DUMP_HEADER}\n");
    for (i, p) in prompts.iter().enumerate() {
        for (l, route) in route_prompt(model, p)?.layers.iter().enumerate() {
            for m in ModuleId::ALL {
                let gate = route.gate_for(m.index());
                out.push_str(&format!(
                    "{i},{l},{},{:.6},{},{:.6}\n",
                    m.label(),
                    route.probs[m.index()],
                    u8::from(gate.is_some()),
                    gate.unwrap_or(0.0)
                ));
            }
        }
    }
    Ok(out)
}
