use proptest::prelude::*;

use milora_core::harness::checkpoint::{decode, encode};
use milora_core::harness::config::RunConfig;
use milora_core::model::MiLoraModel;
use milora_core::numcore::{Graph, ParamStore, Tensor};
use milora_core::router::{assignment_fractions, select, top_k, GatingMode};

fn distribution(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

proptest! {
    #[test]
    fn top_k_is_sorted_unique_and_dominant(raw in prop::collection::vec(0.0f64..1.0, 7), k in 1usize..=7) {
        let sel = top_k(&raw, k);
        prop_assert_eq!(sel.len(), k);
        prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
        let worst_in = sel.iter().map(|&i| raw[i]).fold(f64::INFINITY, f64::min);
        for i in (0..7).filter(|i| !sel.contains(i)) {
            prop_assert!(raw[i] <= worst_in);
            if raw[i] == worst_in {
                // ties go to the lower index
                prop_assert!(sel.iter().any(|&j| raw[j] == worst_in && j < i));
            }
        }
    }

    #[test]
    fn weighted_gates_renormalize(raw in prop::collection::vec(0.01f64..1.0, 7), k in 1usize..=7) {
        let p = distribution(raw);
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let probs = g.constant(Tensor::row(p.clone()));
        let weighted = select(&mut g, probs, k, GatingMode::Weighted).unwrap().route;
        let binary = select(&mut g, probs, k, GatingMode::Binary).unwrap().route;
        prop_assert!((weighted.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(binary.gates.iter().all(|&v| v == 1.0));
        prop_assert_eq!(&weighted.selected, &binary.selected);
    }

    #[test]
    fn assignment_fractions_form_a_distribution(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 7), 1..20)) {
        let f = assignment_fractions(&rows);
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn config_text_roundtrips(seed in 0u64..1000, k in 1usize..=7, lambda in 0.0f64..1.0, rank in 1usize..16) {
        let mut cfg = RunConfig::copy_preset();
        cfg.seed = seed;
        cfg.model.router.k = k;
        cfg.model.lora_rank = rank;
        cfg.train.lambda_lb = lambda;
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_roundtrip_bit_exactly(seed in 0u64..1000, scale in -2.0f64..2.0) {
        let mut cfg = RunConfig::copy_preset();
        cfg.model.backbone.d_model = 16;
        cfg.model.backbone.d_ffn = 24;
        cfg.model.backbone.n_heads = 2;
        cfg.model.lora_rank = 2;
        cfg.seed = seed;
        let mut model = MiLoraModel::new(cfg.model.clone(), seed).unwrap();
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for (i, v) in model.store.get_mut(id).value.data_mut().iter_mut().enumerate() {
                *v += scale * (i as f64 * 0.37).sin();
            }
        }
        let bytes = encode(&cfg, &model);
        let (cfg2, model2) = decode(&bytes).unwrap();
        prop_assert_eq!(&cfg2, &cfg);
        prop_assert_eq!(encode(&cfg2, &model2), bytes);
    }
}
