use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tdkd_bench::utterances;
use tdkd_core::decoding::{beam_decode_model, greedy_decode_model};
use tdkd_core::nnet::{ModelConfig, TransducerModel};

fn decode(c: &mut Criterion) {
    let utts = utterances(8);
    let x = &utts[0].features;
    let cfg = ModelConfig::student(x.dim(), 12, false);
    let model = TransducerModel::new(cfg, 1).unwrap();
    c.bench_function("greedy_student", |b| b.iter(|| greedy_decode_model(&model, black_box(x)).unwrap()));
    for beam in [1, 4, 8] {
        c.bench_function(&format!("beam{beam}_student"), |b| {
            b.iter(|| beam_decode_model(&model, black_box(x), beam, None).unwrap())
        });
    }
}

fn forward_backward(c: &mut Criterion) {
    let utts = utterances(8);
    let u = &utts[0];
    let dim = u.features.dim();
    for (name, cfg) in [
        ("student", ModelConfig::student(dim, 12, false)),
        ("teacher", ModelConfig::teacher(dim, 12)),
    ] {
        let model = TransducerModel::new(cfg, 1).unwrap();
        c.bench_function(&format!("forward_backward_{name}"), |b| {
            b.iter(|| {
                let tape = model.forward(&u.features, &u.tokens).unwrap();
                let g = tdkd_core::transducer::transducer_nll_grad(tape.lattice(), &u.tokens).unwrap();
                model.backward(&tape, &g).unwrap()
            })
        });
    }
}

criterion_group!(benches, decode, forward_backward);
criterion_main!(benches);
