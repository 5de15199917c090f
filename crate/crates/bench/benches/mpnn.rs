use criterion::{black_box, criterion_group, criterion_main, Criterion};
use dcnlab::gnn::{backward, forward_cached, greedy_actions, q_values};
use dcnlab_bench::{fabric, model, random_features};

fn mpnn(c: &mut Criterion) {
    let (_, g) = fabric();
    let x = random_features(g.len(), 7);
    let mut group = c.benchmark_group("mpnn");
    for rounds in [1, 2, 4] {
        let p = model(rounds, 3);
        group.bench_function(format!("forward/k{rounds}"), |b| b.iter(|| q_values(&p, &g, black_box(&x)).unwrap()));
        group.bench_function(format!("forward_backward/k{rounds}"), |b| {
            let mut grads = p.zero_grads();
            let dq: Vec<Vec<f64>> = vec![vec![1e-2; p.n_actions()]; g.len()];
            b.iter(|| {
                let cache = forward_cached(&p, &g, black_box(&x)).unwrap();
                backward(&p, &g, &cache, &dq, &mut grads).unwrap()
            })
        });
    }
    let p = model(2, 3);
    let q = q_values(&p, &g, &x).unwrap();
    group.bench_function("greedy_actions", |b| b.iter(|| greedy_actions(black_box(&q)).unwrap()));
    group.finish();
}

criterion_group!(benches, mpnn);
criterion_main!(benches);
