//! Count-based n-gram language model over the non-blank vocabulary.
//!
//! Conditional estimates are add-α smoothed. A history that never occurred
//! in training backs off to its longest seen suffix, down to the unigram.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{TokenSeq, Vocab, BLANK};

/// Value left in the blank slot of [`NgramLm::step_dist`]. The caller
/// replaces it according to the emission context.
pub const BLANK_SENTINEL: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramLm {
    order: usize,
    alpha: f64,
    vocab: usize,
    /// history (up to `order - 1` tokens) → successor counts indexed by token id.
    counts: BTreeMap<Vec<usize>, Vec<u64>>,
}

#[derive(Serialize, Deserialize)]
struct LmFile {
    version: u32,
    order: usize,
    alpha: f64,
    vocab: usize,
    counts: Vec<(Vec<usize>, Vec<u64>)>,
}

const LM_VERSION: u32 = 1;

impl NgramLm {
    /// Counts every n-gram of order `1..=order` in `corpus`. Histories never
    /// cross sequence boundaries.
    pub fn train(corpus: &[TokenSeq], vocab: Vocab, order: usize, alpha: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("n-gram order must be >= 1"));
        }
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("smoothing constant must be > 0, got {alpha}")));
        }
        if corpus.iter().all(TokenSeq::is_empty) {
            return Err(Error::invalid("empty LM training corpus"));
        }
        let k = vocab.size();
        let mut counts: BTreeMap<Vec<usize>, Vec<u64>> = BTreeMap::new();
        for seq in corpus {
            seq.check_vocab(vocab)?;
            let s = seq.as_slice();
            for i in 0..s.len() {
                for h in 0..order.min(i + 1) {
                    let history = s[i - h..i].to_vec();
                    counts.entry(history).or_insert_with(|| vec![0; k])[s[i]] += 1;
                }
            }
        }
        Ok(Self {
            order,
            alpha,
            vocab: k,
            counts,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Number of non-blank symbols the model distributes mass over.
    fn num_labels(&self) -> usize {
        self.vocab - 1
    }

    /// Longest suffix of `history` (at most `order - 1` tokens) seen in training.
    fn context<'a>(&'a self, history: &[usize]) -> &'a [u64] {
        let max = (self.order - 1).min(history.len());
        for h in (0..=max).rev() {
            if let Some(c) = self.counts.get(&history[history.len() - h..]) {
                return c;
            }
        }
        unreachable!("unigram counts exist for any non-empty corpus")
    }

    /// `p(token | history)` with add-α smoothing.
    pub fn prob(&self, history: &[usize], token: usize) -> f64 {
        assert!(token != BLANK && token < self.vocab, "token {token} is not a label");
        let c = self.context(history);
        let total: u64 = c.iter().sum();
        (c[token] as f64 + self.alpha) / (total as f64 + self.alpha * self.num_labels() as f64)
    }

    /// K-vector of log-probabilities given the tokens emitted so far. The
    /// blank slot holds [`BLANK_SENTINEL`].
    pub fn step_dist(&self, history: &[usize]) -> Vec<f64> {
        let c = self.context(history);
        let total: u64 = c.iter().sum();
        let denom = (total as f64 + self.alpha * self.num_labels() as f64).ln();
        let mut out = Vec::with_capacity(self.vocab);
        out.push(BLANK_SENTINEL);
        for &n in &c[1..] {
            out.push((n as f64 + self.alpha).ln() - denom);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = LmFile {
            version: LM_VERSION,
            order: self.order,
            alpha: self.alpha,
            vocab: self.vocab,
            counts: self.counts.iter().map(|(h, c)| (h.clone(), c.clone())).collect(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: LmFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.version != LM_VERSION {
            return Err(Error::Version {
                what: "LM",
                found: file.version,
                expected: LM_VERSION,
            });
        }
        if file.order == 0 || file.vocab < 2 || file.counts.iter().any(|(_, c)| c.len() != file.vocab) {
            return Err(Error::format("LM file", "inconsistent order/vocabulary/count tables"));
        }
        if !file.counts.iter().any(|(h, _)| h.is_empty()) {
            return Err(Error::format("LM file", "missing unigram counts"));
        }
        Ok(Self {
            order: file.order,
            alpha: file.alpha,
            vocab: file.vocab,
            counts: file.counts.into_iter().collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::logsumexp;

    fn seqs(v: &[&[usize]]) -> Vec<TokenSeq> {
        v.iter().map(|s| TokenSeq::new(s.to_vec()).unwrap()).collect()
    }

    #[test]
    fn bigram_add_one_example() {
        // vocab {a=1, b=2}, corpus "a a b".
        let lm = NgramLm::train(&seqs(&[&[1, 1, 2]]), Vocab::new(3).unwrap(), 2, 1.0).unwrap();
        assert!((lm.prob(&[1], 1) - 0.5).abs() < 1e-15);
        assert!((lm.prob(&[1], 2) - 0.5).abs() < 1e-15);
        // Unigram: c(a)=2, c(b)=1, N=3 → (2+1)/(3+2).
        assert!((lm.prob(&[], 1) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn repeated_token_dominates_unigram() {
        let lm = NgramLm::train(&seqs(&[&[3, 3, 3, 3]]), Vocab::new(5).unwrap(), 1, 1.0).unwrap();
        let d = lm.step_dist(&[]);
        let best = (1..5).max_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        assert_eq!(best, 3);
    }

    #[test]
    fn unseen_history_backs_off() {
        let corpus = seqs(&[&[1, 2, 1], &[2, 2]]);
        let lm = NgramLm::train(&corpus, Vocab::new(4).unwrap(), 2, 0.5).unwrap();
        // Token 3 never appears as history.
        assert_eq!(lm.step_dist(&[3]), lm.step_dist(&[]));
        // Trigram over a bigram model: only the last token matters.
        assert_eq!(lm.step_dist(&[2, 1]), lm.step_dist(&[1]));
    }

    #[test]
    fn distributions_normalised_and_blank_sentinel() {
        let corpus = seqs(&[&[1, 2, 3, 1], &[2, 2, 3]]);
        let lm = NgramLm::train(&corpus, Vocab::new(5).unwrap(), 3, 1.0).unwrap();
        for h in [&[][..], &[1], &[2, 3], &[4, 4], &[1, 2]] {
            let d = lm.step_dist(h);
            assert_eq!(d[0], BLANK_SENTINEL);
            assert!(logsumexp(&d[1..]).abs() < 1e-9);
            assert!(d[1..].iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn rejects_bad_config() {
        let v = Vocab::new(3).unwrap();
        assert!(NgramLm::train(&[], v, 2, 1.0).is_err());
        assert!(NgramLm::train(&seqs(&[&[1]]), v, 0, 1.0).is_err());
        assert!(NgramLm::train(&seqs(&[&[1]]), v, 2, 0.0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let lm = NgramLm::train(&seqs(&[&[1, 2, 1, 1]]), Vocab::new(3).unwrap(), 2, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.json");
        lm.save(&p).unwrap();
        let back = NgramLm::load(&p).unwrap();
        assert_eq!(back, lm);
        let again = NgramLm::train(&seqs(&[&[1, 2, 1, 1]]), Vocab::new(3).unwrap(), 2, 1.0).unwrap();
        assert_eq!(again, lm);
    }
}
