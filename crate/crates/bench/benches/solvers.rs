use criterion::{black_box, criterion_group, criterion_main, Criterion};
use parabolicity_core::capacity::capacity;
use parabolicity_core::convexity::lemma_star_suite;
use parabolicity_core::domain::{build_radial_grid, build_surface_grid};
use parabolicity_core::evans::evans_iterate;
use parabolicity_core::solver::{solve_dirichlet, solve_obstacle, ObstacleProblem};
use parabolicity_core::{BoundaryValues, Grading, ModelManifold, NodeSet, OuterRadius, RadialGrid, SolverOptions};

fn radial(c: &mut Criterion) {
    let m = ModelManifold::euclidean(2);
    let mut group = c.benchmark_group("radial dirichlet M=1024");
    for p in [1.5, 2.0, 3.0] {
        let d = build_radial_grid(&m, p, 2.0, 1024).unwrap();
        let bc = BoundaryValues::condenser(&d, 1.0, 0.0);
        group.bench_function(format!("p={p}"), |b| {
            b.iter(|| solve_dirichlet(black_box(&d), &bc, p, &SolverOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn surface_capacity(c: &mut Criterion) {
    let m = ModelManifold::euclidean(2);
    let d = build_surface_grid(&m, 3.0, 2.0, 64, 64).unwrap();
    let k = d.inner_boundary();
    c.bench_function("surface capacity 64x64 p=3", |b| {
        b.iter(|| capacity(black_box(&d), &k, 3.0, &SolverOptions::default()).unwrap())
    });
}

fn obstacle(c: &mut Criterion) {
    let m = ModelManifold::euclidean(2);
    let d = build_radial_grid(&m, 2.0, 3.0, 512).unwrap();
    let lr = 3f64.ln();
    let psi = d.nodes().iter().map(|n| 1.1 - 6.0 * (n.log_r / lr - 0.4).abs()).collect();
    let problem = ObstacleProblem {
        p: 2.0,
        obstacle: psi,
        boundary: BoundaryValues::condenser(&d, 1.0, 0.0),
    };
    c.bench_function("radial obstacle M=512 p=2", |b| {
        b.iter(|| solve_obstacle(black_box(&d), &problem, &SolverOptions::default()).unwrap())
    });
}

fn evans(c: &mut Criterion) {
    let d = RadialGrid::new(OuterRadius::LogRadius(4.5), 72)
        .graded(Grading::Logarithmic)
        .build_surface(&ModelManifold::euclidean(2), 2.0, 64)
        .unwrap();
    let m = ModelManifold::euclidean(2).with_base_radius(0.5f64.exp());
    let k = NodeSet::from_fn(d.len(), |i| d.ring_of(i) == 0 && i % d.angular() <= 32);
    let mut group = c.benchmark_group("evans");
    group.sample_size(10);
    group.bench_function("72x64 four levels", |b| {
        b.iter(|| evans_iterate(black_box(&d), &k, &m, 2.0, 4, &SolverOptions::default()).unwrap())
    });
    group.finish();
}

fn lemma_suite(c: &mut Criterion) {
    c.bench_function("growth estimate 4x10^4 pairs", |b| {
        b.iter(|| lemma_star_suite(black_box(&[1.5, 2.0, 3.0, 4.5]), 10_000, 7).unwrap())
    });
}

criterion_group!(benches, radial, surface_capacity, obstacle, evans, lemma_suite);
criterion_main!(benches);
