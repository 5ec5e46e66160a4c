use std::sync::OnceLock;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::corpus::{Features, Utterance};
use crate::decoding::{beam_decode_model, greedy_decode_model, wer, Fusion, Hypothesis, WerReport};
use crate::error::{Error, Result};
use crate::kd::{
    kd_collapsed, kd_collapsed_grad, kd_full_lattice, kd_full_lattice_grad, kd_one_best, kd_one_best_grad,
    CollapsedTargetLattice, KdTargetSet,
};
use crate::lattice::{OutputLattice, TokenSeq};
use crate::nnet::{sgd_step, Gradient, TransducerModel};
use crate::transducer::{transducer_nll_with_grad, LatticeGradient};

use super::config::TrainSchedule;

/// Worker pool sized by `TDKD_THREADS` (default: all cores).
pub fn pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("TDKD_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

/// Distillation target for one training utterance.
#[derive(Debug, Clone)]
pub enum KdTarget {
    OneBest(KdTargetSet),
    Full(OutputLattice),
    Collapsed(CollapsedTargetLattice),
}

impl KdTarget {
    pub fn stored_values(&self) -> usize {
        match self {
            KdTarget::OneBest(t) => t.stored_values(),
            KdTarget::Full(l) => l.values().len(),
            KdTarget::Collapsed(c) => c.stored_values(),
        }
    }
}

/// One utterance as the trainer sees it.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub features: Features,
    /// Ground truth or pseudo-transcription; defines the student lattice.
    pub tokens: TokenSeq,
    /// Include the transducer loss for this utterance.
    pub nll: bool,
    pub target: Option<KdTarget>,
}

impl TrainExample {
    pub fn supervised(u: &Utterance) -> Self {
        Self {
            id: u.id.clone(),
            features: u.features.clone(),
            tokens: u.tokens.clone(),
            nll: true,
            target: None,
        }
    }
}

/// Objective weights shared by every example in a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub lambda: f64,
    pub tau: usize,
}

impl Objective {
    pub const NLL_ONLY: Objective = Objective { lambda: 0.0, tau: 0 };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleLoss {
    pub nll: f64,
    pub kd: f64,
    pub total: f64,
}

/// Loss terms and their lattice gradient for one example.
pub fn example_lattice_grad(
    ex: &TrainExample,
    lattice: &OutputLattice,
    obj: Objective,
) -> Result<(ExampleLoss, LatticeGradient)> {
    let (nll, mut grad) = if ex.nll {
        transducer_nll_with_grad(lattice, &ex.tokens)?
    } else {
        (0.0, LatticeGradient::zeros_like(lattice))
    };
    let mut kd = 0.0;
    if let Some(target) = &ex.target {
        let kd_grad = match target {
            KdTarget::OneBest(t) => {
                kd = kd_one_best(t, lattice, obj.tau)?;
                kd_one_best_grad(t, lattice, obj.tau)?
            }
            KdTarget::Full(z) => {
                kd = kd_full_lattice(z, lattice)?;
                kd_full_lattice_grad(z, lattice)?
            }
            KdTarget::Collapsed(c) => {
                kd = kd_collapsed(c, lattice, &ex.tokens)?;
                kd_collapsed_grad(c, lattice, &ex.tokens)?
            }
        };
        grad.add_scaled(&kd_grad, obj.lambda)?;
    }
    let total = crate::kd::combined_loss(nll, kd, obj.lambda);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss for {} is {total}", ex.id)));
    }
    Ok((ExampleLoss { nll, kd, total }, grad))
}

/// Loss and parameter gradient of one example.
pub fn example_gradient(model: &TransducerModel, ex: &TrainExample, obj: Objective) -> Result<(ExampleLoss, Gradient)> {
    let tape = model.forward(&ex.features, &ex.tokens)?;
    let (loss, lattice_grad) = example_lattice_grad(ex, tape.lattice(), obj)?;
    Ok((loss, model.backward(&tape, &lattice_grad)?))
}

/// Mean loss and gradient over a batch, summed in batch order whatever the
/// worker count.
pub fn batch_gradient(model: &TransducerModel, batch: &[&TrainExample], obj: Objective) -> Result<(f64, Gradient)> {
    let parts: Vec<Result<(ExampleLoss, Gradient)>> =
        pool().install(|| batch.par_iter().map(|ex| example_gradient(model, ex, obj)).collect());
    let mut total = Gradient::zeros(model.num_params());
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l.total;
        total.add(&g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_wer: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest dev WER (earliest on ties).
    pub model: TransducerModel,
    pub best_epoch: usize,
    pub best_dev_wer: f64,
    pub history: Vec<EpochLog>,
}

/// SGD over `examples`, selecting the epoch with the best greedy dev WER.
/// The initial model is not a candidate.
pub fn train(
    mut model: TransducerModel,
    examples: &[TrainExample],
    dev: &[Utterance],
    schedule: &TrainSchedule,
    obj: Objective,
    seed: u64,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep shuffling independent of the stream used for initialisation.
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best: Option<(TransducerModel, usize, f64)> = None;
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut lr = schedule.lr;
    for epoch in 1..=schedule.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(schedule.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grad) = batch_gradient(&model, &batch, obj)?;
            sgd_step(&mut model, &grad, lr, schedule.clip)?;
            epoch_loss += loss * batch.len() as f64;
        }
        lr *= schedule.lr_decay;
        let train_loss = epoch_loss / examples.len() as f64;
        let dev_wer = if dev.is_empty() {
            train_loss
        } else {
            evaluate(&model, dev, 1, None)?.0.wer()
        };
        info!("epoch {epoch}: train loss {train_loss:.4}, dev WER {:.2}%", 100.0 * dev_wer);
        history.push(EpochLog {
            epoch,
            train_loss,
            dev_wer,
        });
        if best.as_ref().is_none_or(|(_, _, w)| dev_wer < *w) {
            best = Some((model.clone(), epoch, dev_wer));
        }
    }
    let (model, best_epoch, best_dev_wer) = best.expect("at least one epoch");
    debug!("selected epoch {best_epoch}");
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_dev_wer,
        history,
    })
}

/// Decodes every utterance and pools edit counts. Width 1 is greedy.
pub fn decode_all(
    model: &TransducerModel,
    features: &[&Features],
    beam: usize,
    fusion: Option<Fusion<'_>>,
) -> Result<Vec<Hypothesis>> {
    let hyps: Vec<Result<Hypothesis>> = pool().install(|| {
        features
            .par_iter()
            .map(|x| {
                if beam == 1 && fusion.is_none() {
                    greedy_decode_model(model, x)
                } else {
                    let mut h = beam_decode_model(model, x, beam, fusion)?;
                    Ok(h.swap_remove(0))
                }
            })
            .collect()
    });
    hyps.into_iter().collect()
}

pub fn evaluate(
    model: &TransducerModel,
    utts: &[Utterance],
    beam: usize,
    fusion: Option<Fusion<'_>>,
) -> Result<(WerReport, Vec<Hypothesis>)> {
    let feats: Vec<&Features> = utts.iter().map(|u| &u.features).collect();
    let hyps = decode_all(model, &feats, beam, fusion)?;
    let mut report = WerReport::default();
    for (u, h) in utts.iter().zip(&hyps) {
        report.accumulate(&wer(u.tokens.as_slice(), h.tokens.as_slice()));
    }
    Ok((report, hyps))
}
