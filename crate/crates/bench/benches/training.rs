use cafegan::data::ImageSource;
use cafegan::training::TrainState;
use cafegan_bench::{desk_batch, desk_config};
use criterion::{criterion_group, criterion_main, Criterion};

fn steps(c: &mut Criterion) {
    let data = desk_batch(16);
    let (x, v) = data.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    let mut group = c.benchmark_group("train step batch 16");
    group.sample_size(10);
    let mut state = TrainState::new(desk_config()).unwrap();
    group.bench_function("discriminator", |b| b.iter(|| state.train_step_d(&x, &v).unwrap()));
    let mut state = TrainState::new(desk_config()).unwrap();
    group.bench_function("generator", |b| b.iter(|| state.train_step_g(&x, &v).unwrap()));
    group.finish();
}

criterion_group!(benches, steps);
criterion_main!(benches);
