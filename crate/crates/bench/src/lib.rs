//! Shared fixtures for the generation benchmarks.

use milora_core::backbone::BackboneConfig;
use milora_core::model::{MiLoraModel, ModelConfig};
use milora_core::numcore::Tensor;
use milora_core::router::{GatingMode, RouterConfig};

pub const PROMPT: [usize; 12] = [5, 9, 2, 14, 7, 7, 1, 3, 11, 6, 8, 0];

/// Four-layer toy model with non-zero adapters so every LoRA path does work.
pub fn bench_model(k: usize, gating: GatingMode) -> MiLoraModel {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            vocab_size: 16,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 128,
            max_seq_len: 64,
            ..BackboneConfig::default()
        },
        lora_rank: 8,
        router: RouterConfig { k, gating, ..RouterConfig::default() },
        ..ModelConfig::default()
    };
    let mut model = MiLoraModel::new(cfg, 7).expect("valid bench config");
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.name().ends_with(".b")).map(|(id, _)| id).collect();
    for id in ids {
        let v = model.store.value(id);
        let data = (0..v.numel()).map(|i| ((i % 13) as f64 - 6.0) * 1e-3).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        model.store.set_value(id, t).expect("same shape");
    }
    model
}
