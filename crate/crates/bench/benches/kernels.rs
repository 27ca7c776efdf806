use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use curate_bench::gaussian;
use curate_core::autodiff::Graph;
use curate_core::curation::{score_pair, CurationConfig};
use curate_core::losses::{regularized_loss, LossConfig};

fn conv2d(c: &mut Criterion) {
    let x = gaussian(&[32, 16, 16, 16], 1);
    let k = gaussian(&[32, 16, 3, 3], 2);
    c.bench_function("conv2d_fwd_bwd_32x16x16x16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let kv = g.param(k.clone());
            let y = g.conv2d(xv, kv, 1, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap()
        })
    });
}

fn loss(c: &mut Criterion) {
    let cfg = LossConfig::default();
    let mut group = c.benchmark_group("regularized_loss");
    for n in [32usize, 128] {
        let z1 = gaussian(&[n, 32], 3);
        let z2 = gaussian(&[n, 32], 4);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| regularized_loss(&z1, &z2, &cfg).unwrap())
        });
    }
    group.finish();
}

fn frd(c: &mut Criterion) {
    let cfg = CurationConfig::default();
    let mut group = c.benchmark_group("frd_score");
    for d in [32usize, 128] {
        let v1 = gaussian(&[256, d], 5);
        let v2 = gaussian(&[256, d], 6);
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| score_pair(&v1, &v2, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv2d, loss, frd);
criterion_main!(benches);
