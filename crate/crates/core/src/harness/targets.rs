use rayon::prelude::*;

use crate::corpus::{Features, UnlabelledUtterance, Utterance};
use crate::decoding::Fusion;
use crate::error::Result;
use crate::kd::{fuse_targets, CollapsedTargetLattice, KdTargetSet, KdVariant};
use crate::lattice::TokenSeq;
use crate::lm::NgramLm;
use crate::nnet::TransducerModel;
use crate::transducer::viterbi_alignment;

use super::train::{decode_all, pool, KdTarget, TrainExample};

/// Teacher one-best targets for `y`, fused with the LM when given.
pub fn one_best_target(
    teacher: &TransducerModel,
    id: &str,
    x: &Features,
    y: &TokenSeq,
    fusion: Option<Fusion<'_>>,
) -> Result<KdTargetSet> {
    let lattice = teacher.forward_lattice(x, y)?;
    let (alignment, _) = viterbi_alignment(&lattice, y)?;
    let target = KdTargetSet::from_teacher(id, &lattice, alignment)?;
    match fusion {
        Some(f) => fuse_with_lm(&target, y, f),
        None => Ok(target),
    }
}

/// Applies shallow fusion to cached targets; the LM history at node
/// `(t, u)` is the first `u` tokens of `y`.
pub fn fuse_with_lm(target: &KdTargetSet, y: &TokenSeq, fusion: Fusion<'_>) -> Result<KdTargetSet> {
    let lm_dists: Vec<Vec<f64>> = target
        .alignment
        .steps()
        .iter()
        .map(|s| fusion.lm.step_dist(&y.as_slice()[..s.u]))
        .collect();
    fuse_targets(target, &lm_dists, fusion.beta)
}

/// Builds the target of the requested kind for one utterance.
pub fn make_target(
    teacher: &TransducerModel,
    id: &str,
    x: &Features,
    y: &TokenSeq,
    variant: KdVariant,
    fusion: Option<Fusion<'_>>,
) -> Result<KdTarget> {
    Ok(match variant {
        KdVariant::OneBest => KdTarget::OneBest(one_best_target(teacher, id, x, y, fusion)?),
        KdVariant::FullLattice => KdTarget::Full(teacher.forward_lattice(x, y)?),
        KdVariant::Collapsed => {
            KdTarget::Collapsed(CollapsedTargetLattice::from_teacher(&teacher.forward_lattice(x, y)?, y)?)
        }
    })
}

/// Labelled utterances keep their transcriptions and gain teacher targets.
pub fn labelled_examples(
    teacher: &TransducerModel,
    utts: &[Utterance],
    variant: KdVariant,
    fusion: Option<Fusion<'_>>,
) -> Result<Vec<TrainExample>> {
    let out: Vec<Result<TrainExample>> = pool().install(|| {
        utts.par_iter()
            .map(|u| {
                Ok(TrainExample {
                    target: Some(make_target(teacher, &u.id, &u.features, &u.tokens, variant, fusion)?),
                    ..TrainExample::supervised(u)
                })
            })
            .collect()
    });
    out.into_iter().collect()
}

/// Teacher beam-search transcriptions of unlabelled utterances.
pub fn pseudo_transcribe(
    teacher: &TransducerModel,
    utts: &[UnlabelledUtterance],
    beam: usize,
    fusion: Option<Fusion<'_>>,
) -> Result<Vec<TokenSeq>> {
    let feats: Vec<&Features> = utts.iter().map(|u| &u.features).collect();
    Ok(decode_all(teacher, &feats, beam, fusion)?
        .into_iter()
        .map(|h| h.tokens)
        .collect())
}

/// Unlabelled utterances trained against pseudo-transcriptions. Targets are
/// attached when `variant` is given; `nll` controls the transducer term.
pub fn unlabelled_examples(
    teacher: &TransducerModel,
    utts: &[UnlabelledUtterance],
    pseudo: &[TokenSeq],
    variant: Option<KdVariant>,
    fusion: Option<Fusion<'_>>,
    nll: bool,
) -> Result<Vec<TrainExample>> {
    let out: Vec<Result<TrainExample>> = pool().install(|| {
        utts.par_iter()
            .zip(pseudo)
            .map(|(u, y)| {
                let target = match variant {
                    Some(v) => Some(make_target(teacher, &u.id, &u.features, y, v, fusion)?),
                    None => None,
                };
                Ok(TrainExample {
                    id: u.id.clone(),
                    features: u.features.clone(),
                    tokens: y.clone(),
                    nll,
                    target,
                })
            })
            .collect()
    });
    out.into_iter().collect()
}

/// Fusion settings when `beta > 0` and an LM is present.
pub fn fusion_for(lm: Option<&NgramLm>, beta: f64) -> Option<Fusion<'_>> {
    lm.filter(|_| beta > 0.0).map(|lm| Fusion { lm, beta })
}
