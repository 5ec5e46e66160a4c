use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tdkd_bench::{lattice_pair, LOSS_SIZES, VARIANTS};
use tdkd_core::corpus::Features;
use tdkd_core::harness::bench::{build_target, variant_name};
use tdkd_core::harness::train::{example_lattice_grad, Objective, TrainExample};
use tdkd_core::transducer::transducer_nll_with_grad;

fn nll(c: &mut Criterion) {
    let mut group = c.benchmark_group("transducer_nll");
    for &(t, u, k) in &LOSS_SIZES {
        let (_, student, y) = lattice_pair(t, u, k);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{t}x{u}x{k}")), &(), |b, _| {
            b.iter(|| transducer_nll_with_grad(black_box(&student), black_box(&y)).unwrap())
        });
    }
    group.finish();
}

fn kd_variants(c: &mut Criterion) {
    let mut group = c.benchmark_group("kd_loss");
    for &(t, u, k) in &LOSS_SIZES {
        let (teacher, student, y) = lattice_pair(t, u, k);
        for v in VARIANTS {
            let ex = TrainExample {
                id: "bench".into(),
                features: Features::new(0, 1, Vec::new()).unwrap(),
                tokens: y.clone(),
                nll: false,
                target: Some(build_target(v, &teacher, &y).unwrap()),
            };
            let obj = Objective { lambda: 1.0, tau: 0 };
            group.bench_with_input(BenchmarkId::new(variant_name(v), format!("{t}x{u}x{k}")), &(), |b, _| {
                b.iter(|| example_lattice_grad(black_box(&ex), black_box(&student), obj).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, nll, kd_variants);
criterion_main!(benches);
