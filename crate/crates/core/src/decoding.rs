//! Frame-synchronous transducer decoding and WER scoring.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Features;
use crate::error::{Error, Result};
use crate::lattice::{log_add, OutputLattice, TokenSeq, BLANK};
use crate::lm::NgramLm;
use crate::nnet::{EncodedFrames, PredState, TransducerModel};

/// Default cap on labels emitted within a single frame.
pub const MAX_SYMBOLS_PER_FRAME: usize = 10;

/// Default beam width.
pub const DEFAULT_BEAM: usize = 4;

/// Anything that yields per-frame output distributions conditioned on the
/// labels emitted so far.
pub trait DecodeScorer {
    type State: Clone;

    fn frames(&self) -> usize;
    fn vocab(&self) -> usize;
    fn initial(&self) -> Self::State;
    fn advance(&self, state: &Self::State, token: usize) -> Self::State;
    fn log_probs(&self, t: usize, state: &Self::State) -> Vec<f64>;
}

/// Scores with a trained model over one encoded utterance.
pub struct ModelScorer<'a> {
    model: &'a TransducerModel,
    enc: EncodedFrames,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a TransducerModel, x: &Features) -> Result<Self> {
        Ok(Self {
            model,
            enc: model.encode(x)?,
        })
    }
}

impl DecodeScorer for ModelScorer<'_> {
    type State = PredState;

    fn frames(&self) -> usize {
        self.enc.frames()
    }

    fn vocab(&self) -> usize {
        self.model.vocab()
    }

    fn initial(&self) -> PredState {
        self.model.pred_initial()
    }

    fn advance(&self, state: &PredState, token: usize) -> PredState {
        self.model.pred_step(state, token)
    }

    fn log_probs(&self, t: usize, state: &PredState) -> Vec<f64> {
        self.model.joint_log_probs(&self.enc, t, state)
    }
}

/// Scores straight from a lattice whose node distributions depend only on
/// how many labels were emitted, not which. Past the lattice's last label
/// position only blank is possible.
pub struct LatticeScorer<'a> {
    lattice: &'a OutputLattice,
}

impl<'a> LatticeScorer<'a> {
    pub fn new(lattice: &'a OutputLattice) -> Self {
        Self { lattice }
    }
}

impl DecodeScorer for LatticeScorer<'_> {
    type State = usize;

    fn frames(&self) -> usize {
        self.lattice.frames()
    }

    fn vocab(&self) -> usize {
        self.lattice.vocab()
    }

    fn initial(&self) -> usize {
        0
    }

    fn advance(&self, state: &usize, _token: usize) -> usize {
        state + 1
    }

    fn log_probs(&self, t: usize, state: &usize) -> Vec<f64> {
        if *state <= self.lattice.labels() {
            self.lattice.node(t, *state).to_vec()
        } else {
            let mut v = vec![f64::NEG_INFINITY; self.lattice.vocab()];
            v[BLANK] = 0.0;
            v
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: TokenSeq,
    pub score: f64,
    /// Frame at which each token was emitted.
    pub emission_frames: Vec<usize>,
}

impl Hypothesis {
    pub fn empty() -> Self {
        Self {
            tokens: TokenSeq::empty(),
            score: 0.0,
            emission_frames: Vec::new(),
        }
    }
}

/// At each frame, emit the argmax symbol until blank wins or the per-frame
/// cap is reached, then advance. Ties go to the lowest symbol id (blank).
pub fn greedy_decode<S: DecodeScorer>(scorer: &S, max_symbols: usize) -> Hypothesis {
    let mut state = scorer.initial();
    let mut hyp = Hypothesis::empty();
    for t in 0..scorer.frames() {
        for n in 0..=max_symbols {
            let lp = scorer.log_probs(t, &state);
            if n == max_symbols {
                hyp.score += lp[BLANK];
                break;
            }
            let k = argmax(&lp);
            hyp.score += lp[k];
            if k == BLANK {
                break;
            }
            hyp.tokens.push(k);
            hyp.emission_frames.push(t);
            state = scorer.advance(&state, k);
        }
    }
    hyp
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Shallow-fusion settings for beam search.
#[derive(Debug, Clone, Copy)]
pub struct Fusion<'a> {
    pub lm: &'a NgramLm,
    pub beta: f64,
}

#[derive(Clone)]
struct BeamHyp<St> {
    tokens: Vec<usize>,
    frames: Vec<usize>,
    score: f64,
    state: St,
    /// Has consumed the current frame (emitted its blank).
    done: bool,
}

/// Frame-synchronous beam search.
///
/// Within a frame every live hypothesis proposes its blank continuation
/// (which closes the frame) and each label continuation. The pool of closed
/// hypotheses and new candidates is cut to the `beam` best after each
/// expansion round; closed hypotheses with identical labels are merged by
/// log-sum-exp. With fusion, label continuations add `beta · log LM(k | prefix)`.
pub fn beam_decode<S: DecodeScorer>(
    scorer: &S,
    beam: usize,
    fusion: Option<Fusion<'_>>,
    max_symbols: usize,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::invalid("beam width must be >= 1"));
    }
    if let Some(f) = fusion {
        if !(f.beta >= 0.0) {
            return Err(Error::invalid(format!("fusion weight must be >= 0, got {}", f.beta)));
        }
        if f.lm.vocab() != scorer.vocab() {
            return Err(Error::shape("LM and model vocabularies differ"));
        }
    }
    let vocab = scorer.vocab();
    let mut beams = vec![BeamHyp {
        tokens: Vec::new(),
        frames: Vec::new(),
        score: 0.0,
        state: scorer.initial(),
        done: false,
    }];

    for t in 0..scorer.frames() {
        let mut live = std::mem::take(&mut beams);
        let mut closed: Vec<BeamHyp<S::State>> = Vec::new();
        for step in 0..=max_symbols {
            let mut pool = std::mem::take(&mut closed);
            for h in &live {
                let lp = scorer.log_probs(t, &h.state);
                pool.push(BeamHyp {
                    score: h.score + lp[BLANK],
                    done: true,
                    ..h.clone()
                });
                if step == max_symbols {
                    continue;
                }
                let lm = fusion.map(|f| (f.beta, f.lm.step_dist(&h.tokens)));
                for k in 1..vocab {
                    let mut score = h.score + lp[k];
                    if let Some((beta, d)) = &lm {
                        if *beta != 0.0 {
                            score += beta * d[k];
                        }
                    }
                    if score == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut tokens = h.tokens.clone();
                    tokens.push(k);
                    let mut frames = h.frames.clone();
                    frames.push(t);
                    pool.push(BeamHyp {
                        tokens,
                        frames,
                        score,
                        // State is advanced lazily once the candidate survives pruning.
                        state: h.state.clone(),
                        done: false,
                    });
                }
            }
            let pool = prune(merge(pool), beam);
            live.clear();
            for mut h in pool {
                if h.done {
                    closed.push(h);
                } else {
                    let k = *h.tokens.last().expect("label continuation");
                    h.state = scorer.advance(&h.state, k);
                    live.push(h);
                }
            }
            if live.is_empty() {
                break;
            }
        }
        beams = closed
            .into_iter()
            .map(|h| BeamHyp { done: false, ..h })
            .collect();
    }

    Ok(beams
        .into_iter()
        .map(|h| Hypothesis {
            tokens: TokenSeq::new(h.tokens).expect("labels are non-blank"),
            score: h.score,
            emission_frames: h.frames,
        })
        .collect())
}

fn merge<St>(pool: Vec<BeamHyp<St>>) -> Vec<BeamHyp<St>> {
    let mut index: HashMap<(bool, Vec<usize>), usize> = HashMap::new();
    let mut out: Vec<BeamHyp<St>> = Vec::with_capacity(pool.len());
    for h in pool {
        match index.get(&(h.done, h.tokens.clone())) {
            Some(&i) => {
                // Keep the emission times of the stronger path.
                if h.score > out[i].score {
                    out[i].frames = h.frames;
                }
                out[i].score = log_add(out[i].score, h.score);
            }
            None => {
                index.insert((h.done, h.tokens.clone()), out.len());
                out.push(h);
            }
        }
    }
    out
}

fn prune<St>(mut pool: Vec<BeamHyp<St>>, beam: usize) -> Vec<BeamHyp<St>> {
    // Stable: among equal scores the earlier candidate (blank first) wins.
    pool.sort_by(|a, b| b.score.total_cmp(&a.score));
    pool.truncate(beam);
    pool
}

/// Convenience wrappers over a model.
pub fn greedy_decode_model(model: &TransducerModel, x: &Features) -> Result<Hypothesis> {
    Ok(greedy_decode(&ModelScorer::new(model, x)?, MAX_SYMBOLS_PER_FRAME))
}

pub fn beam_decode_model(
    model: &TransducerModel,
    x: &Features,
    beam: usize,
    fusion: Option<Fusion<'_>>,
) -> Result<Vec<Hypothesis>> {
    beam_decode(&ModelScorer::new(model, x)?, beam, fusion, MAX_SYMBOLS_PER_FRAME)
}

/// Edit counts between a reference and a hypothesis word sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / N`. An empty reference gives 0 for an empty hypothesis
    /// and `+inf` otherwise.
    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            if self.errors() == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.errors() as f64 / self.ref_words as f64
        }
    }

    pub fn is_infinite(&self) -> bool {
        self.ref_words == 0 && self.errors() > 0
    }

    /// Pools counts for a corpus-level rate.
    pub fn accumulate(&mut self, other: &WerReport) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_words += other.ref_words;
    }
}

/// Levenshtein alignment with unit costs. When several edit sequences are
/// optimal, the trace prefers substitution, then insertion, then deletion.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> WerReport {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        cost[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cost[i][j] = sub.min(cost[i][j - 1] + 1).min(cost[i - 1][j] + 1);
        }
    }
    let mut report = WerReport {
        ref_words: n,
        ..WerReport::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let mismatch = reference[i - 1] != hypothesis[j - 1];
            if cost[i][j] == cost[i - 1][j - 1] + usize::from(mismatch) {
                report.substitutions += usize::from(mismatch);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i][j] == cost[i][j - 1] + 1 {
            report.insertions += 1;
            j -= 1;
        } else {
            report.deletions += 1;
            i -= 1;
        }
    }
    report
}

/// Mean of `streaming frame − non-streaming frame` over tokens.
pub fn emission_lag(streaming: &Hypothesis, non_streaming: &Hypothesis) -> Result<f64> {
    if streaming.tokens != non_streaming.tokens {
        return Err(Error::invalid("emission lag needs identical token sequences"));
    }
    let n = streaming.emission_frames.len();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = streaming
        .emission_frames
        .iter()
        .zip(&non_streaming.emission_frames)
        .map(|(&a, &b)| a as f64 - b as f64)
        .sum();
    Ok(total / n as f64)
}

/// One line of the hypothesis JSON Lines output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub id: String,
    pub tokens: Vec<usize>,
    pub text: String,
    pub score: f64,
    pub frames: Vec<usize>,
}

impl HypothesisRecord {
    pub fn new(id: impl Into<String>, h: &Hypothesis) -> Self {
        Self {
            id: id.into(),
            tokens: h.tokens.as_slice().to_vec(),
            text: h.tokens.to_text(),
            score: h.score,
            frames: h.emission_frames.clone(),
        }
    }
}
