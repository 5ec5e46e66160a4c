//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls the library's dynamic programs; every quantity is
//! computed by enumeration or directly from the definitions.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdkd_core::corpus::Features;
use tdkd_core::lm::NgramLm;
use tdkd_core::{OutputLattice, Step, TokenSeq, BLANK};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable log-sum-exp over a slice, written out independently.
pub fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let z0 = lse(z);
    z.iter().map(|x| x - z0).collect()
}

/// Random logits of shape `T × (U+1) × K`.
pub fn random_logits(r: &mut ChaCha8Rng, frames: usize, labels: usize, vocab: usize, scale: f64) -> Vec<f64> {
    (0..frames * (labels + 1) * vocab)
        .map(|_| r.random_range(-scale..scale))
        .collect()
}

pub fn random_tokens(r: &mut ChaCha8Rng, labels: usize, vocab: usize) -> TokenSeq {
    TokenSeq::new((0..labels).map(|_| r.random_range(1..vocab)).collect()).unwrap()
}

/// Random small lattice problem in the ranges used by the oracle checks.
pub struct Case {
    pub frames: usize,
    pub labels: usize,
    pub vocab: usize,
    pub logits: Vec<f64>,
    pub tokens: TokenSeq,
}

impl Case {
    pub fn random(r: &mut ChaCha8Rng, max_t: usize, max_u: usize, max_k: usize) -> Self {
        let frames = r.random_range(1..=max_t);
        let labels = r.random_range(0..=max_u);
        let vocab = r.random_range(2..=max_k);
        let logits = random_logits(r, frames, labels, vocab, 3.0);
        let tokens = random_tokens(r, labels, vocab);
        Self {
            frames,
            labels,
            vocab,
            logits,
            tokens,
        }
    }

    pub fn lattice(&self) -> OutputLattice {
        OutputLattice::from_logits(self.frames, self.labels, self.vocab, self.logits.clone()).unwrap()
    }

    /// Log-probabilities from the raw logits by a naive per-node softmax.
    pub fn naive_log_probs(&self) -> Vec<f64> {
        self.logits
            .chunks(self.vocab)
            .flat_map(log_softmax)
            .collect()
    }
}

/// Log-probability of symbol `k` at node `(t, u)` of a flat log-prob array.
pub fn at(lp: &[f64], labels: usize, vocab: usize, t: usize, u: usize, k: usize) -> f64 {
    lp[(t * (labels + 1) + u) * vocab + k]
}

/// Every complete path through a `T × (U+1)` grid ending in the final blank
/// at `(T-1, U)`.
pub fn enumerate_alignments(frames: usize, tokens: &[usize]) -> Vec<Vec<Step>> {
    fn go(t: usize, u: usize, frames: usize, y: &[usize], path: &mut Vec<Step>, out: &mut Vec<Vec<Step>>) {
        if t == frames {
            if u == y.len() {
                out.push(path.clone());
            }
            return;
        }
        if u < y.len() {
            path.push(Step { t, u, k: y[u] });
            go(t, u + 1, frames, y, path, out);
            path.pop();
        }
        path.push(Step { t, u, k: BLANK });
        go(t + 1, u, frames, y, path, out);
        path.pop();
    }
    let mut out = Vec::new();
    go(0, 0, frames, tokens, &mut Vec::new(), &mut out);
    out
}

pub fn path_score(lp: &[f64], labels: usize, vocab: usize, path: &[Step]) -> f64 {
    path.iter().map(|s| at(lp, labels, vocab, s.t, s.u, s.k)).sum()
}

pub fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Cross-entropy `−Σ exp(p)·q` between log-distributions, by definition.
pub fn ce(p: &[f64], q: &[f64]) -> f64 {
    -p.iter().zip(q).map(|(a, b)| if *a == f64::NEG_INFINITY { 0.0 } else { a.exp() * b }).sum::<f64>()
}

/// Maximum over coordinates of `|a − n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central finite differences of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn random_features(r: &mut ChaCha8Rng, frames: usize, dim: usize) -> Features {
    Features::new(frames, dim, (0..frames * dim).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Exhaustive frame-synchronous decoder over a lattice whose node
/// distributions depend only on the label count.
///
/// Returns every reachable label sequence with its total log-probability
/// (plus `beta · log P_LM` per label when an LM is given), summed over all
/// emission patterns with at most `max_symbols` labels per frame.
pub fn exhaustive_decode(
    lattice: &OutputLattice,
    max_symbols: usize,
    lm: Option<(&NgramLm, f64)>,
) -> Vec<(Vec<usize>, f64)> {
    let (frames, labels, vocab) = (lattice.frames(), lattice.labels(), lattice.vocab());
    let dist = |t: usize, u: usize| -> Vec<f64> {
        if u <= labels {
            lattice.node(t, u).to_vec()
        } else {
            let mut v = vec![f64::NEG_INFINITY; vocab];
            v[BLANK] = 0.0;
            v
        }
    };
    let mut finals: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    fn walk(
        t: usize,
        emitted_here: usize,
        tokens: &mut Vec<usize>,
        score: f64,
        frames: usize,
        vocab: usize,
        max_symbols: usize,
        lm: Option<(&NgramLm, f64)>,
        dist: &dyn Fn(usize, usize) -> Vec<f64>,
        finals: &mut Vec<(Vec<usize>, Vec<f64>)>,
    ) {
        if score == f64::NEG_INFINITY {
            return;
        }
        if t == frames {
            match finals.iter_mut().find(|(z, _)| z == tokens) {
                Some((_, scores)) => scores.push(score),
                None => finals.push((tokens.clone(), vec![score])),
            }
            return;
        }
        let d = dist(t, tokens.len());
        walk(t + 1, 0, tokens, score + d[BLANK], frames, vocab, max_symbols, lm, dist, finals);
        if emitted_here < max_symbols {
            for k in 1..vocab {
                let mut s = score + d[k];
                if let Some((lm, beta)) = lm {
                    if beta != 0.0 {
                        s += beta * lm.prob(tokens, k).ln();
                    }
                }
                tokens.push(k);
                walk(t, emitted_here + 1, tokens, s, frames, vocab, max_symbols, lm, dist, finals);
                tokens.pop();
            }
        }
    }
    walk(0, 0, &mut Vec::new(), 0.0, frames, vocab, max_symbols, lm, &dist, &mut finals);
    finals.into_iter().map(|(z, s)| (z, lse(&s))).collect()
}
