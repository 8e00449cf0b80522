use criterion::{criterion_group, criterion_main, Criterion};
use hilbert_bench::{grid, micro_rhs, operator, velocity_grid};
use hilbert_core::benchmarks::halfspace_manufactured;
use hilbert_core::collision::CollisionConfig;
use hilbert_core::knudsen::HalfSpaceConfig;
use hilbert_core::CollisionOperator;
use std::f64::consts::PI;
use std::hint::black_box;

fn assembly(c: &mut Criterion) {
    let mut g = c.benchmark_group("collision");
    g.sample_size(10);
    g.bench_function("assemble degree 6", |b| {
        b.iter(|| CollisionOperator::assemble(black_box(&CollisionConfig { degree: 6, gamma_degree: 2, ..Default::default() })))
    });
    let op = operator(8, 4);
    let h = micro_rhs(&op);
    g.bench_function("L^-1 solve, degree 8", |b| b.iter(|| op.linverse(black_box(&h)).unwrap()));
    g.finish();
}

fn poisson(c: &mut Criterion) {
    let gr = grid(16, 33);
    let s = gr.sample(|x| (2.0 * PI * x[0]).cos() * (PI * x[2]).cos());
    let zero = vec![0.0; 16 * 16];
    c.bench_function("Neumann Poisson 16x16x33", |b| b.iter(|| gr.poisson_neumann(black_box(&s), &zero, &zero)));
}

fn halfspace(c: &mut Criterion) {
    let op = operator(6, 2);
    let vg = velocity_grid(&op);
    let mut g = c.benchmark_group("half-space");
    g.sample_size(10);
    g.bench_function("manufactured source, degree 6", |b| {
        b.iter(|| halfspace_manufactured(&op, &vg, 0.5, 1.0, HalfSpaceConfig::default()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, assembly, poisson, halfspace);
criterion_main!(benches);
