mod common;

use common::*;
use tdkd_core::corpus::{generate, SynthConfig};
use tdkd_core::decoding::{beam_decode_model, greedy_decode_model, Fusion};
use tdkd_core::harness::train::{batch_gradient, example_gradient, train, KdTarget, Objective, TrainExample};
use tdkd_core::harness::TrainSchedule;
use tdkd_core::kd::KdTargetSet;
use tdkd_core::lm::NgramLm;
use tdkd_core::nnet::{encoder_outputs, ModelConfig, TransducerModel};
use tdkd_core::transducer::viterbi_alignment;
use tdkd_core::Vocab;

fn small_task(seed: u64) -> SynthConfig {
    SynthConfig {
        n_labelled: 24,
        n_unlabelled: 0,
        n_dev: 8,
        n_test: 4,
        n_lm_text: 50,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn streaming_encoder_ignores_future_frames() {
    let mut r = rng(301);
    let cfg = ModelConfig::student(8, 12, true);
    let model = TransducerModel::new(cfg, 3).unwrap();
    for _ in 0..20 {
        let frames = rand::Rng::random_range(&mut r, 3..20);
        let x = random_features(&mut r, frames, 8);
        let cut = rand::Rng::random_range(&mut r, 1..frames);
        let mut y = x.clone();
        for t in cut..frames {
            for v in y.frame_mut(t) {
                *v += 5.0;
            }
        }
        let a = encoder_outputs(&model, &x).unwrap();
        let b = encoder_outputs(&model, &y).unwrap();
        for t in 0..cut {
            assert_eq!(a[t], b[t], "frame {t} saw the future (cut {cut})");
        }
        assert_ne!(a[cut], b[cut]);
    }
}

#[test]
fn non_streaming_encoder_does_look_ahead() {
    let mut r = rng(302);
    let model = TransducerModel::new(ModelConfig::student(8, 12, false), 3).unwrap();
    let x = random_features(&mut r, 10, 8);
    let mut y = x.clone();
    y.frame_mut(9)[0] += 5.0;
    let a = encoder_outputs(&model, &x).unwrap();
    let b = encoder_outputs(&model, &y).unwrap();
    assert_ne!(a[0], b[0]);
}

#[test]
fn beam_one_is_greedy_on_models() {
    let (data, _) = generate(&small_task(5)).unwrap();
    for (i, streaming) in [false, true].into_iter().enumerate() {
        let model = TransducerModel::new(ModelConfig::student(8, 12, streaming), 10 + i as u64).unwrap();
        for u in data.labelled.iter().chain(&data.dev) {
            let g = greedy_decode_model(&model, &u.features).unwrap();
            let b = beam_decode_model(&model, &u.features, 1, None).unwrap();
            assert_eq!(b[0].tokens, g.tokens);
            assert_eq!(b[0].emission_frames, g.emission_frames);
        }
    }
}

#[test]
fn zero_fusion_weight_leaves_beam_unchanged() {
    let (data, _) = generate(&small_task(6)).unwrap();
    let lm = NgramLm::train(&data.lm_text, Vocab::new(12).unwrap(), 2, 1.0).unwrap();
    let model = TransducerModel::new(ModelConfig::student(8, 12, false), 4).unwrap();
    for u in &data.dev {
        let plain = beam_decode_model(&model, &u.features, 4, None).unwrap();
        let fused = beam_decode_model(&model, &u.features, 4, Some(Fusion { lm: &lm, beta: 0.0 })).unwrap();
        assert_eq!(plain, fused);
    }
}

fn quick() -> TrainSchedule {
    TrainSchedule {
        epochs: 2,
        lr: 0.1,
        batch_size: 4,
        clip: 5.0,
        lr_decay: 0.9,
    }
}

#[test]
fn zero_lambda_reproduces_the_baseline_trainer() {
    let (data, _) = generate(&small_task(7)).unwrap();
    let cfg = ModelConfig::student(8, 12, false);
    let teacher = TransducerModel::new(ModelConfig::student(8, 12, false), 99).unwrap();
    let plain: Vec<TrainExample> = data.labelled.iter().map(TrainExample::supervised).collect();
    let with_targets: Vec<TrainExample> = data
        .labelled
        .iter()
        .map(|u| {
            let lattice = teacher.forward_lattice(&u.features, &u.tokens).unwrap();
            let (a, _) = viterbi_alignment(&lattice, &u.tokens).unwrap();
            TrainExample {
                target: Some(KdTarget::OneBest(KdTargetSet::from_teacher(u.id.clone(), &lattice, a).unwrap())),
                ..TrainExample::supervised(u)
            }
        })
        .collect();
    let base = train(TransducerModel::new(cfg.clone(), 1).unwrap(), &plain, &data.dev, &quick(), Objective::NLL_ONLY, 1).unwrap();
    let kd = train(
        TransducerModel::new(cfg, 1).unwrap(),
        &with_targets,
        &data.dev,
        &quick(),
        Objective { lambda: 0.0, tau: 0 },
        1,
    )
    .unwrap();
    let bits = |m: &TransducerModel| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&base.model), bits(&kd.model));
    assert_eq!(base.history, kd.history);
}

#[test]
fn training_is_repeatable() {
    let (data, _) = generate(&small_task(8)).unwrap();
    let ex: Vec<TrainExample> = data.labelled.iter().map(TrainExample::supervised).collect();
    let run = || {
        let m = TransducerModel::new(ModelConfig::student(8, 12, false), 2).unwrap();
        let out = train(m, &ex, &data.dev, &quick(), Objective::NLL_ONLY, 2).unwrap();
        let mut bytes = Vec::new();
        out.model.write_to(&mut bytes).unwrap();
        bytes
    };
    assert_eq!(run(), run());
}

#[test]
fn batch_gradient_equals_sequential_sum() {
    let (data, _) = generate(&small_task(9)).unwrap();
    let ex: Vec<TrainExample> = data.labelled.iter().map(TrainExample::supervised).collect();
    let refs: Vec<&TrainExample> = ex.iter().collect();
    let model = TransducerModel::new(ModelConfig::student(8, 12, false), 5).unwrap();
    let (loss, g) = batch_gradient(&model, &refs, Objective::NLL_ONLY).unwrap();
    let mut sum = vec![0.0; model.num_params()];
    let mut total = 0.0;
    for e in &ex {
        let (l, gi) = example_gradient(&model, e, Objective::NLL_ONLY).unwrap();
        total += l.total;
        for (s, v) in sum.iter_mut().zip(&gi.0) {
            *s += v;
        }
    }
    let n = ex.len() as f64;
    let sum: Vec<u64> = sum.iter().map(|v| (v * (1.0 / n)).to_bits()).collect();
    assert_eq!(g.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), sum);
    assert_eq!(loss, total / n);
}
