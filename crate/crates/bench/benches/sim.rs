use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use dcnlab_bench::loaded_sim;

fn interval(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulator");
    let base = loaded_sim(50);
    // one agent interval is 100 ticks at the default settings
    group.throughput(Throughput::Elements(100));
    group.bench_function("run_interval/loaded", |b| {
        b.iter_batched_ref(|| base.clone(), |sim| sim.run_interval().unwrap(), BatchSize::LargeInput)
    });
    group.bench_function("observe_agents", |b| {
        b.iter_batched_ref(|| base.clone(), |sim| sim.observe_agents(), BatchSize::LargeInput)
    });
    group.finish();
}

criterion_group!(benches, interval);
criterion_main!(benches);
