//! Log-domain numerics and the lattice/alignment data model.
//!
//! A transducer output lattice covers `T` frames and `U + 1` label positions.
//! Node `(t, u)` holds the distribution over the `K` output symbols after
//! consuming frames `0..t` and emitting the first `u` labels. Frames are
//! 0-based throughout the crate. Storage is row-major with `t` outermost and
//! the symbol index innermost, so a node's distribution is a contiguous slice.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the blank symbol. Fixed for the whole toolkit.
pub const BLANK: usize = 0;

/// `log(sum(exp(xs)))` with the max-shift trick.
///
/// Returns `-inf` when every entry is `-inf`.
///
/// # Panics
///
/// Panics on empty input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "logsumexp of an empty slice");
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Replaces logits with their log-softmax.
pub fn log_softmax_in_place(xs: &mut [f64]) {
    let lse = logsumexp(xs);
    for x in xs.iter_mut() {
        *x -= lse;
    }
}

/// Output vocabulary. Symbol 0 is always blank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid(format!(
                "vocabulary needs blank plus at least one label, got K={size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn blank(&self) -> usize {
        BLANK
    }

    /// Non-blank symbol ids, `1..K`.
    pub fn labels(&self) -> std::ops::Range<usize> {
        1..self.size
    }
}

/// A label sequence. Never contains blank.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if let Some(pos) = tokens.iter().position(|&k| k == BLANK) {
            return Err(Error::invalid(format!("blank symbol at position {pos} of a token sequence")));
        }
        Ok(Self(tokens))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn push(&mut self, token: usize) {
        assert_ne!(token, BLANK, "blank pushed onto a token sequence");
        self.0.push(token);
    }

    /// Checks every token is a label of `vocab`.
    pub fn check_vocab(&self, vocab: Vocab) -> Result<()> {
        match self.0.iter().find(|&&k| k >= vocab.size()) {
            Some(k) => Err(Error::invalid(format!("token {k} outside vocabulary of size {}", vocab.size()))),
            None => Ok(()),
        }
    }

    /// Space-separated word rendering used for WER scoring.
    pub fn to_text(&self) -> String {
        self.0.iter().map(|k| format!("w{k}")).collect::<Vec<_>>().join(" ")
    }
}

impl TryFrom<Vec<usize>> for TokenSeq {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        TokenSeq::new(v)
    }
}

impl From<TokenSeq> for Vec<usize> {
    fn from(t: TokenSeq) -> Self {
        t.0
    }
}

/// Dense `T × (U+1) × K` grid of log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputLattice {
    frames: usize,
    labels: usize,
    vocab: usize,
    values: Vec<f64>,
}

/// Result of [`OutputLattice::validate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeReport {
    /// Largest `|logsumexp(node)|` over all nodes.
    pub max_residual: f64,
    /// Node `(t, u)` where the largest residual occurs.
    pub worst_node: (usize, usize),
    /// First entry that is NaN or `+inf`, if any.
    pub non_finite: Option<(usize, usize, usize)>,
}

impl LatticeReport {
    pub fn is_ok(&self, tol: f64) -> bool {
        self.non_finite.is_none() && self.max_residual <= tol
    }
}

/// Tolerance used for the lattice normalisation invariant.
pub const NORM_TOL: f64 = 1e-6;

impl OutputLattice {
    fn check_dims(frames: usize, labels: usize, vocab: usize, len: usize) -> Result<()> {
        if frames == 0 {
            return Err(Error::invalid("lattice with zero frames"));
        }
        if vocab < 2 {
            return Err(Error::invalid(format!("lattice vocabulary K={vocab} < 2")));
        }
        let expected = frames * (labels + 1) * vocab;
        if len != expected {
            return Err(Error::shape(format!(
                "lattice T={frames} U={labels} K={vocab} needs {expected} values, got {len}"
            )));
        }
        Ok(())
    }

    /// Builds a lattice by log-softmaxing raw logits node by node.
    pub fn from_logits(frames: usize, labels: usize, vocab: usize, mut logits: Vec<f64>) -> Result<Self> {
        Self::check_dims(frames, labels, vocab, logits.len())?;
        for node in logits.chunks_exact_mut(vocab) {
            log_softmax_in_place(node);
        }
        Ok(Self {
            frames,
            labels,
            vocab,
            values: logits,
        })
    }

    /// Wraps log-probabilities, rejecting anything that breaks normalisation.
    pub fn from_log_probs(frames: usize, labels: usize, vocab: usize, values: Vec<f64>) -> Result<Self> {
        Self::check_dims(frames, labels, vocab, values.len())?;
        let lattice = Self {
            frames,
            labels,
            vocab,
            values,
        };
        let report = lattice.validate();
        if !report.is_ok(NORM_TOL) {
            return Err(Error::invalid(format!(
                "lattice not normalised: residual {:.3e} at node {:?}, non-finite {:?}",
                report.max_residual, report.worst_node, report.non_finite
            )));
        }
        Ok(lattice)
    }

    /// Same as [`from_log_probs`](Self::from_log_probs) but skips validation.
    /// Used by tests that need deliberately broken lattices.
    pub fn from_raw_unchecked(frames: usize, labels: usize, vocab: usize, values: Vec<f64>) -> Result<Self> {
        Self::check_dims(frames, labels, vocab, values.len())?;
        Ok(Self {
            frames,
            labels,
            vocab,
            values,
        })
    }

    /// Every node uniform over `K` symbols.
    pub fn uniform(frames: usize, labels: usize, vocab: usize) -> Result<Self> {
        let n = frames * (labels + 1) * vocab;
        Self::from_logits(frames, labels, vocab, vec![0.0; n])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn num_nodes(&self) -> usize {
        self.frames * (self.labels + 1)
    }

    /// Flat storage in `(t, u, k)` order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn offset(&self, t: usize, u: usize) -> usize {
        assert!(
            t < self.frames && u <= self.labels,
            "node ({t}, {u}) outside lattice T={} U={}",
            self.frames,
            self.labels
        );
        (t * (self.labels + 1) + u) * self.vocab
    }

    /// `log p(k | t, u)`.
    ///
    /// # Panics
    ///
    /// Panics if any index is out of range.
    #[inline]
    pub fn node_logprob(&self, t: usize, u: usize, k: usize) -> f64 {
        assert!(k < self.vocab, "symbol {k} outside vocabulary of size {}", self.vocab);
        self.values[self.offset(t, u) + k]
    }

    /// The whole log-distribution at node `(t, u)`.
    #[inline]
    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        let o = self.offset(t, u);
        &self.values[o..o + self.vocab]
    }

    pub fn node_mut(&mut self, t: usize, u: usize) -> &mut [f64] {
        let o = self.offset(t, u);
        &mut self.values[o..o + self.vocab]
    }

    /// Checks per-node normalisation and finiteness.
    pub fn validate(&self) -> LatticeReport {
        let mut report = LatticeReport {
            max_residual: 0.0,
            worst_node: (0, 0),
            non_finite: None,
        };
        for t in 0..self.frames {
            for u in 0..=self.labels {
                let node = self.node(t, u);
                if report.non_finite.is_none() {
                    if let Some(k) = node.iter().position(|x| x.is_nan() || *x == f64::INFINITY) {
                        report.non_finite = Some((t, u, k));
                    }
                }
                let residual = logsumexp(node).abs();
                // NaN residual always wins so it is never hidden.
                if residual.is_nan() || residual > report.max_residual {
                    report.max_residual = residual;
                    report.worst_node = (t, u);
                }
            }
        }
        report
    }

    pub fn same_shape(&self, other: &OutputLattice) -> bool {
        self.frames == other.frames && self.labels == other.labels && self.vocab == other.vocab
    }

    const MAGIC: &'static [u8; 4] = b"LATT";
    const VERSION: u32 = 1;

    /// Binary dump: `LATT`, version, `T`, `U`, `K` as little-endian u32,
    /// then the values as little-endian f64 in storage order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        for v in [Self::VERSION, self.frames as u32, self.labels as u32, self.vocab as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::format("lattice file", "bad magic"));
        }
        let mut header = [0u32; 4];
        for h in header.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *h = u32::from_le_bytes(b);
        }
        let [version, frames, labels, vocab] = header;
        if version != Self::VERSION {
            return Err(Error::Version {
                what: "lattice",
                found: version,
                expected: Self::VERSION,
            });
        }
        let (frames, labels, vocab) = (frames as usize, labels as usize, vocab as usize);
        let n = frames * (labels + 1) * vocab;
        let mut values = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        Self::from_raw_unchecked(frames, labels, vocab, values)
    }
}

/// One emission on a lattice path: symbol `k` emitted at node `(t, u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Step {
    pub t: usize,
    pub u: usize,
    pub k: usize,
}

impl From<[usize; 3]> for Step {
    fn from([t, u, k]: [usize; 3]) -> Self {
        Step { t, u, k }
    }
}

impl From<Step> for [usize; 3] {
    fn from(s: Step) -> Self {
        [s.t, s.u, s.k]
    }
}

/// A monotone lattice path from `(0, 0)` to the final blank at `(T-1, U)`.
///
/// Blank steps advance `t`, label steps advance `u`. A complete path has
/// exactly `T` blank steps and `U` label steps.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alignment {
    steps: Vec<Step>,
}

impl Alignment {
    /// Validates `steps` as a complete path for `tokens` over `frames` frames.
    pub fn new(steps: Vec<Step>, frames: usize, tokens: &TokenSeq) -> Result<Self> {
        let a = Self { steps };
        a.check(frames, tokens)?;
        Ok(a)
    }

    pub(crate) fn from_steps_unchecked(steps: Vec<Step>) -> Self {
        Self { steps }
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of frames and labels the path covers.
    pub fn extent(&self) -> (usize, usize) {
        let blanks = self.steps.iter().filter(|s| s.k == BLANK).count();
        (blanks, self.steps.len() - blanks)
    }

    /// Label sequence emitted along the path.
    pub fn tokens(&self) -> TokenSeq {
        TokenSeq(self.steps.iter().filter(|s| s.k != BLANK).map(|s| s.k).collect())
    }

    /// Checks the path is a complete, monotone alignment of `tokens`.
    pub fn check(&self, frames: usize, tokens: &TokenSeq) -> Result<()> {
        let y = tokens.as_slice();
        let (mut t, mut u) = (0usize, 0usize);
        for (i, s) in self.steps.iter().enumerate() {
            if t >= frames {
                return Err(Error::invalid(format!("alignment step {i} after the last frame")));
            }
            if (s.t, s.u) != (t, u) {
                return Err(Error::invalid(format!(
                    "alignment step {i} at ({}, {}) but path is at ({t}, {u})",
                    s.t, s.u
                )));
            }
            if s.k == BLANK {
                t += 1;
            } else {
                if u >= y.len() || y[u] != s.k {
                    return Err(Error::invalid(format!(
                        "alignment step {i} emits {} where label {} is expected",
                        s.k,
                        y.get(u).map_or("<none>".to_string(), |k| k.to_string())
                    )));
                }
                u += 1;
            }
        }
        if t != frames || u != y.len() {
            return Err(Error::invalid(format!(
                "alignment ends at ({t}, {u}), expected ({frames}, {})",
                y.len()
            )));
        }
        Ok(())
    }
}
