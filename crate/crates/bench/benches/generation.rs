use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use milora_bench::{bench_model, PROMPT};
use milora_core::inference::{generate, GenerationConfig, GenerationMode};
use milora_core::router::GatingMode;

fn decode(c: &mut Criterion) {
    let mut group = c.benchmark_group("decode_32_tokens");
    group.sample_size(10);
    for k in [3, 7] {
        let model = bench_model(k, GatingMode::Weighted);
        for mode in [GenerationMode::PromptAware, GenerationMode::PerTokenBaseline] {
            let cfg = GenerationConfig {
                mode,
                max_new_tokens: 32,
                greedy: true,
                ..GenerationConfig::default()
            };
            group.bench_with_input(BenchmarkId::new(mode.as_str(), k), &cfg, |b, cfg| {
                b.iter(|| generate(&model, black_box(&PROMPT), cfg).expect("generation"))
            });
        }
    }
    group.finish();
}

fn beam(c: &mut Criterion) {
    let model = bench_model(3, GatingMode::Weighted);
    let cfg = GenerationConfig {
        max_new_tokens: 16,
        beam_size: 3,
        ..GenerationConfig::default()
    };
    c.bench_function("beam3_16_tokens", |b| {
        b.iter(|| generate(&model, black_box(&PROMPT), &cfg).expect("generation"))
    });
}

criterion_group!(benches, decode, beam);
criterion_main!(benches);
