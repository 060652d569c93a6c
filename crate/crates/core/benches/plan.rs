use criterion::{criterion_group, criterion_main, Criterion};
use est_lora::energy::topk_report;
use est_lora::gate::schedule_from_scores;
use est_lora::{align, GateConfig, LoraAdapter, LoraLayer, Matrix, Parallelism, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schedule(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let keys: Vec<String> = (0..560).map(|i| format!("l{i:04}")).collect();
    let scores: Vec<(f64, f64)> = keys.iter().map(|_| (rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0))).collect();
    let cfg = GateConfig {
        steps: 1000,
        d_score: 0.4,
        ..GateConfig::default()
    };

    let mut group = c.benchmark_group("schedule_1000x560");
    for (name, par) in [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)] {
        group.bench_function(name, |b| b.iter(|| schedule_from_scores(&keys, &scores, &cfg, String::new(), par).unwrap()));
    }
    group.finish();
}

fn topk_importance(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut layer = |key: &str| {
        let mut m = |r, c| Matrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let down = m(8, 160);
        let up = m(160, 8);
        LoraLayer::from_factors(key, down, up, None).unwrap()
    };
    let content = LoraAdapter::new((0..64).map(|i| layer(&format!("l{i:03}"))), Role::Content);
    let style = LoraAdapter::new((0..64).map(|i| layer(&format!("l{i:03}"))), Role::Style);
    let pair = align(content, style).unwrap();

    let mut group = c.benchmark_group("topk_report_64x160");
    group.sample_size(20);
    for (name, par) in [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)] {
        group.bench_function(name, |b| b.iter(|| topk_report(&pair, 0.05, par).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, schedule, topk_importance);
criterion_main!(benches);
