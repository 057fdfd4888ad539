//! Sequential vs rayon execution of the data-parallel kernels.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ldlt_core::linalg::Matrix;
use ldlt_core::network::{empirical_lipschitz_with, Model, ModelKind, ModelSpec};
use ldlt_core::par::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn model(kind: ModelKind) -> Model {
    let mut spec = ModelSpec::new(kind, 32, 10, 128, 4);
    spec.seed = 1;
    Model::new(spec).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = random(n, n, 1);
        let b = random(n, n, 2);
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |bch, _| {
                bch.iter(|| black_box(a.matmul_with(&b, exec)))
            });
        }
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_batch");
    let x = random(2048, 32, 3);
    for kind in [ModelKind::Residual, ModelKind::Feedforward] {
        let m = model(kind);
        for (name, exec) in MODES {
            g.bench_function(BenchmarkId::new(name, kind.label()), |bch| {
                bch.iter(|| black_box(m.forward_batch_with(&x, exec).unwrap()))
            });
        }
    }
    g.finish();
}

fn lipschitz_probe(c: &mut Criterion) {
    let mut g = c.benchmark_group("empirical_lipschitz");
    g.sample_size(10);
    let m = model(ModelKind::Residual);
    for (name, exec) in MODES {
        g.bench_function(name, |bch| bch.iter(|| black_box(empirical_lipschitz_with(&m, 2000, 7, exec))));
    }
    g.finish();
}

criterion_group!(benches, matmul, forward, lipschitz_probe);
criterion_main!(benches);
