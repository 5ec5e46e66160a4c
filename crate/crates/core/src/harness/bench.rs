use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kd::{CollapsedTargetLattice, KdTargetSet, KdVariant};
use crate::lattice::{OutputLattice, TokenSeq};
use crate::transducer::viterbi_alignment;

use super::train::{example_lattice_grad, KdTarget, Objective, TrainExample};

/// Random normalised lattice and a random label sequence of length `labels`.
pub fn random_problem(frames: usize, labels: usize, vocab: usize, seed: u64) -> (OutputLattice, TokenSeq) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = frames * (labels + 1) * vocab;
    let logits = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let lattice = OutputLattice::from_logits(frames, labels, vocab, logits).expect("valid shape");
    let y = TokenSeq::new((0..labels).map(|_| rng.random_range(1..vocab)).collect()).expect("non-blank");
    (lattice, y)
}

pub fn build_target(variant: KdVariant, teacher: &OutputLattice, y: &TokenSeq) -> Result<KdTarget> {
    Ok(match variant {
        KdVariant::OneBest => {
            let (a, _) = viterbi_alignment(teacher, y)?;
            KdTarget::OneBest(KdTargetSet::from_teacher("bench", teacher, a)?)
        }
        KdVariant::FullLattice => KdTarget::Full(teacher.clone()),
        KdVariant::Collapsed => KdTarget::Collapsed(CollapsedTargetLattice::from_teacher(teacher, y)?),
    })
}

/// Stored target values predicted by each variant's memory formula.
pub fn expected_stored_values(variant: KdVariant, frames: usize, labels: usize, vocab: usize) -> usize {
    match variant {
        KdVariant::OneBest => vocab * (frames + labels),
        KdVariant::FullLattice => vocab * frames * (labels + 1),
        KdVariant::Collapsed => 3 * frames * (labels + 1),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityRow {
    pub variant: KdVariant,
    pub frames: usize,
    pub labels: usize,
    pub vocab: usize,
    pub stored_values: usize,
    pub expected: usize,
    /// Mean wall time of one KD loss-plus-gradient evaluation.
    pub seconds: f64,
}

pub fn measure(variant: KdVariant, frames: usize, labels: usize, vocab: usize, reps: usize) -> Result<ComplexityRow> {
    let seed = (frames * 1_000_003 + labels * 1009 + vocab) as u64;
    let (teacher, y) = random_problem(frames, labels, vocab, seed);
    let (student, _) = random_problem(frames, labels, vocab, seed + 1);
    let target = build_target(variant, &teacher, &y)?;
    let stored_values = target.stored_values();
    let features = crate::corpus::Features::new(0, 1, Vec::new())?;
    let ex = TrainExample {
        id: "bench".into(),
        features,
        tokens: y,
        nll: false,
        target: Some(target),
    };
    let obj = Objective { lambda: 1.0, tau: 0 };
    let reps = reps.max(1);
    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(example_lattice_grad(&ex, &student, obj)?);
    }
    Ok(ComplexityRow {
        variant,
        frames,
        labels,
        vocab,
        stored_values,
        expected: expected_stored_values(variant, frames, labels, vocab),
        seconds: start.elapsed().as_secs_f64() / reps as f64,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two points");
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Default sweep: lengths grow with fixed vocabulary and labels-per-frame ratio.
pub fn default_grid() -> Vec<(usize, usize, usize)> {
    [25, 50, 100, 200, 400].iter().map(|&t| (t, t / 5, 64)).collect()
}

pub fn variant_name(v: KdVariant) -> &'static str {
    match v {
        KdVariant::OneBest => "onebest",
        KdVariant::FullLattice => "full",
        KdVariant::Collapsed => "collapsed",
    }
}

pub fn rows_to_csv(rows: &[ComplexityRow]) -> String {
    let mut s = String::from("variant,T,U,K,stored_values,expected,seconds\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{:.3e}",
            variant_name(r.variant),
            r.frames,
            r.labels,
            r.vocab,
            r.stored_values,
            r.expected,
            r.seconds
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(expected_stored_values(KdVariant::OneBest, 100, 20, 64), 7680);
        assert_eq!(expected_stored_values(KdVariant::FullLattice, 100, 20, 64), 134_400);
        let r = measure(KdVariant::OneBest, 100, 20, 64, 1).unwrap();
        assert_eq!(r.stored_values, 7680);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    }
}
