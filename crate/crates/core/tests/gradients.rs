mod common;

use common::*;
use rand_chacha::ChaCha8Rng;
use tdkd_core::corpus::Features;
use tdkd_core::harness::train::{example_gradient, KdTarget, Objective, TrainExample};
use tdkd_core::kd::{
    kd_collapsed, kd_collapsed_grad, kd_full_lattice, kd_full_lattice_grad, kd_one_best, kd_one_best_grad,
    CollapsedTargetLattice, KdTargetSet,
};
use tdkd_core::nnet::{ModelConfig, TransducerModel};
use tdkd_core::transducer::{transducer_nll, transducer_nll_grad, viterbi_alignment};
use tdkd_core::OutputLattice;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

fn lattice(c: &Case, z: &[f64]) -> OutputLattice {
    OutputLattice::from_logits(c.frames, c.labels, c.vocab, z.to_vec()).unwrap()
}

/// Worst relative error of `grad` against finite differences of `loss`,
/// both taken with respect to the student logits.
fn check(c: &Case, grad: &[f64], loss: impl Fn(&OutputLattice) -> f64) -> f64 {
    let numeric = central_diff(&c.logits, H, |z| loss(&lattice(c, z)));
    max_rel_err(grad, &numeric, FLOOR)
}

fn teacher_for(r: &mut ChaCha8Rng, c: &Case) -> OutputLattice {
    OutputLattice::from_logits(c.frames, c.labels, c.vocab, random_logits(r, c.frames, c.labels, c.vocab, 3.0)).unwrap()
}

#[test]
fn transducer_nll_gradient() {
    let mut r = rng(201);
    for _ in 0..20 {
        let c = Case::random(&mut r, 5, 4, 5);
        let g = transducer_nll_grad(&c.lattice(), &c.tokens).unwrap();
        let err = check(&c, g.values(), |l| transducer_nll(l, &c.tokens).unwrap().0);
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn full_lattice_gradient() {
    let mut r = rng(202);
    for _ in 0..20 {
        let c = Case::random(&mut r, 5, 4, 5);
        let teacher = teacher_for(&mut r, &c);
        let g = kd_full_lattice_grad(&teacher, &c.lattice()).unwrap();
        let err = check(&c, g.values(), |l| kd_full_lattice(&teacher, l).unwrap());
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn collapsed_gradient() {
    let mut r = rng(203);
    for _ in 0..20 {
        let c = Case::random(&mut r, 5, 4, 5);
        let targets = CollapsedTargetLattice::from_teacher(&teacher_for(&mut r, &c), &c.tokens).unwrap();
        let g = kd_collapsed_grad(&targets, &c.lattice(), &c.tokens).unwrap();
        let err = check(&c, g.values(), |l| kd_collapsed(&targets, l, &c.tokens).unwrap());
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn one_best_gradient_with_shift() {
    let mut r = rng(204);
    for _ in 0..20 {
        let c = Case::random(&mut r, 5, 4, 5);
        let teacher = teacher_for(&mut r, &c);
        let (a, _) = viterbi_alignment(&teacher, &c.tokens).unwrap();
        let target = KdTargetSet::from_teacher("x", &teacher, a).unwrap();
        for tau in [0, 2] {
            let g = kd_one_best_grad(&target, &c.lattice(), tau).unwrap();
            let err = check(&c, g.values(), |l| kd_one_best(&target, l, tau).unwrap());
            assert!(err < 1e-4, "tau {tau}: {err}");
        }
    }
}

pub fn tiny_config(streaming: bool, vocab: usize) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        vocab,
        left_context: 1,
        lookahead: if streaming { 0 } else { 1 },
        enc_hidden: 4,
        enc_layers: if streaming { 1 } else { 2 },
        bidirectional: !streaming,
        enc_dim: 4,
        pred_embed: 3,
        pred_hidden: 4,
        joint_hidden: 5,
        streaming,
    }
}

fn parameter_case(r: &mut ChaCha8Rng, streaming: bool, variant: usize) -> (TransducerModel, TrainExample, Objective) {
    let vocab = 4;
    let model = TransducerModel::new(tiny_config(streaming, vocab), rand::Rng::random(r)).unwrap();
    let frames = rand::Rng::random_range(r, 2..6);
    let labels = rand::Rng::random_range(r, 1..3);
    let features: Features = random_features(r, frames, 3);
    let tokens = random_tokens(r, labels, vocab);
    let teacher = OutputLattice::from_logits(frames, labels, vocab, random_logits(r, frames, labels, vocab, 2.0)).unwrap();
    let target = match variant {
        0 => KdTarget::OneBest(KdTargetSet::from_teacher("x", &teacher, viterbi_alignment(&teacher, &tokens).unwrap().0).unwrap()),
        1 => KdTarget::Full(teacher),
        _ => KdTarget::Collapsed(CollapsedTargetLattice::from_teacher(&teacher, &tokens).unwrap()),
    };
    let ex = TrainExample {
        id: "x".into(),
        features,
        tokens,
        nll: true,
        target: Some(target),
    };
    let obj = Objective {
        lambda: 0.5,
        tau: if streaming && variant == 0 { 1 } else { 0 },
    };
    (model, ex, obj)
}

fn parameter_error(model: &TransducerModel, ex: &TrainExample, obj: Objective) -> f64 {
    let (_, g) = example_gradient(model, ex, obj).unwrap();
    let numeric = central_diff(model.params(), H, |p| {
        let m = TransducerModel::from_params(model.config().clone(), p.to_vec()).unwrap();
        example_gradient(&m, ex, obj).unwrap().0.total
    });
    max_rel_err(&g.0, &numeric, FLOOR)
}

#[test]
fn end_to_end_parameter_gradient() {
    let mut r = rng(205);
    for i in 0..9 {
        let (model, ex, obj) = parameter_case(&mut r, i % 2 == 1, i % 3);
        let err = parameter_error(&model, &ex, obj);
        assert!(err < 1e-3, "case {i}: {err}");
    }
}
