use aibnet_bench::input;
use aibnet_core::losses::{total_loss, LossConfig};
use aibnet_core::network::{build_model, restore, stage_output, stage_prefixes, Model, ModelConfig};
use aibnet_core::{Ctx, Var};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let blurred = input(&[8, 3, 64, 64], 3);
    let sharp = input(&[8, 3, 64, 64], 4);
    let loss_cfg = LossConfig::default();
    for stage in 0..=2 {
        let mut model: Model<f32> = build_model(&ModelConfig::desk(), 0).unwrap();
        let prefixes = stage_prefixes(stage);
        let refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
        model.store.train_only(&refs);
        group.bench_function(BenchmarkId::new("desk_b8_64px", stage), |b| {
            b.iter(|| {
                let ctx = Ctx::train(&model.store);
                let out = stage_output(&ctx, &model, &Var::constant(blurred.clone()), stage).unwrap();
                let (loss, _) = total_loss(&out, &Var::constant(sharp.clone()), &loss_cfg).unwrap();
                loss.backward()
            })
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let model: Model<f32> = build_model(&ModelConfig::desk(), 0).unwrap();
    let img = input(&[1, 3, 128, 128], 5);
    c.bench_function("restore_desk_128px", |b| b.iter(|| restore(&model, &img, 2).unwrap()));
}

criterion_group!(benches, training_step, inference);
criterion_main!(benches);
