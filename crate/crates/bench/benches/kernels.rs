use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use layerscope::alignment::{alignment_snapshot, SnapshotOptions};
use layerscope::hessian::HwOperator;
use layerscope::linalg::{sym_spectrum, Which};
use layerscope::nnet::{tangent_factors, Loss};
use layerscope_bench::{network_and_data, psd_matrix, random_matrix};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256, 512] {
        let (a, b) = (random_matrix(n, n, 1), random_matrix(n, n, 2));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| black_box(a.matmul(&b)))
        });
    }
    g.finish();
}

fn spectra(c: &mut Criterion) {
    let mut g = c.benchmark_group("sym_spectrum");
    g.sample_size(10);
    for n in [64, 256] {
        let m = psd_matrix(n, 3);
        g.bench_with_input(BenchmarkId::new("full", n), &n, |bch, _| {
            bch.iter(|| black_box(sym_spectrum(&m, Which::All, 1e-10).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("top10", n), &n, |bch, _| {
            bch.iter(|| black_box(sym_spectrum(&m, Which::Top(10), 1e-8).unwrap()))
        });
    }
    g.finish();
}

fn alignment(c: &mut Criterion) {
    let mut g = c.benchmark_group("alignment");
    g.sample_size(10);
    let (net, x, y) = network_and_data(32, 64, 10, 2, 256);
    g.bench_function("layer_grams_depth10_n256", |bch| {
        bch.iter(|| {
            let f = tangent_factors(&net, &x).unwrap();
            for l in 1..=net.depth() {
                black_box(f.layer_gram(l).unwrap());
            }
        })
    });
    g.bench_function("snapshot_depth10_n256", |bch| {
        bch.iter(|| {
            black_box(
                alignment_snapshot(
                    &net,
                    &x,
                    &y,
                    Loss::CrossEntropy,
                    0,
                    SnapshotOptions::default(),
                )
                .unwrap(),
            )
        })
    });
    g.finish();
}

fn hvp(c: &mut Criterion) {
    let mut g = c.benchmark_group("hvp");
    let (net, x, y) = network_and_data(16, 32, 4, 2, 64);
    let op = HwOperator::from_loss(&net, &x, &y, Loss::CrossEntropy).unwrap();
    let v = random_matrix(1, op.dim(), 5).into_vec();
    g.bench_function("depth4_width32_n64", |bch| {
        bch.iter(|| black_box(op.hvp(&v).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, matmul, spectra, alignment, hvp);
criterion_main!(benches);
