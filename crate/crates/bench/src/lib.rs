//! Fixtures shared by the benchmarks.

use tdkd_core::corpus::{SynthConfig, Utterance};
use tdkd_core::harness::bench::random_problem;
use tdkd_core::kd::KdVariant;
use tdkd_core::{OutputLattice, TokenSeq};

/// Lattice sizes swept by the loss benchmarks, as `(T, U, K)`.
pub const LOSS_SIZES: [(usize, usize, usize); 3] = [(50, 10, 64), (100, 20, 64), (200, 40, 64)];

pub const VARIANTS: [KdVariant; 3] = [KdVariant::OneBest, KdVariant::FullLattice, KdVariant::Collapsed];

/// A teacher lattice, a student lattice and a label sequence of matching shape.
pub fn lattice_pair(frames: usize, labels: usize, vocab: usize) -> (OutputLattice, OutputLattice, TokenSeq) {
    let (teacher, y) = random_problem(frames, labels, vocab, 11);
    let (student, _) = random_problem(frames, labels, vocab, 12);
    (teacher, student, y)
}

/// A handful of synthetic utterances at the default task settings.
pub fn utterances(n: usize) -> Vec<Utterance> {
    let cfg = SynthConfig {
        n_labelled: n,
        ..SynthConfig::default()
    };
    tdkd_core::corpus::generate(&cfg).expect("valid config").0.labelled
}
