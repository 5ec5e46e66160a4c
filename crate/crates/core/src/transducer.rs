//! Transducer negative log-likelihood, its gradient, and Viterbi alignment.
//!
//! All recursions run in the log domain over the `T × (U+1)` grid. A path
//! starts at `(0, 0)` and terminates with the blank emitted at `(T-1, U)`.

use crate::error::{Error, Result};
use crate::lattice::{log_add, Alignment, OutputLattice, Step, TokenSeq, BLANK};

/// Log forward/backward scores over the lattice grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBackward {
    frames: usize,
    labels: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    total_logprob: f64,
}

impl ForwardBackward {
    #[inline]
    fn idx(&self, t: usize, u: usize) -> usize {
        t * (self.labels + 1) + u
    }

    /// Log probability of all path prefixes reaching `(t, u)`.
    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[self.idx(t, u)]
    }

    /// Log probability of completing the path from `(t, u)`, including the
    /// emission at `(t, u)` itself.
    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[self.idx(t, u)]
    }

    /// `log p(y | X)`.
    pub fn total_logprob(&self) -> f64 {
        self.total_logprob
    }

    /// Posterior probability that a path visits `(t, u)`.
    pub fn occupancy(&self, t: usize, u: usize) -> f64 {
        (self.alpha(t, u) + self.beta(t, u) - self.total_logprob).exp()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }
}

/// Dense `(t, u, k)` gradient with the same layout as [`OutputLattice`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGradient {
    frames: usize,
    labels: usize,
    vocab: usize,
    values: Vec<f64>,
}

impl LatticeGradient {
    pub fn zeros(frames: usize, labels: usize, vocab: usize) -> Self {
        Self {
            frames,
            labels,
            vocab,
            values: vec![0.0; frames * (labels + 1) * vocab],
        }
    }

    pub fn zeros_like(lattice: &OutputLattice) -> Self {
        Self::zeros(lattice.frames(), lattice.labels(), lattice.vocab())
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    fn offset(&self, t: usize, u: usize) -> usize {
        assert!(t < self.frames && u <= self.labels);
        (t * (self.labels + 1) + u) * self.vocab
    }

    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        let o = self.offset(t, u);
        &self.values[o..o + self.vocab]
    }

    pub fn node_mut(&mut self, t: usize, u: usize) -> &mut [f64] {
        let o = self.offset(t, u);
        &mut self.values[o..o + self.vocab]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &LatticeGradient, scale: f64) -> Result<()> {
        if (self.frames, self.labels, self.vocab) != (other.frames, other.labels, other.vocab) {
            return Err(Error::shape("gradient shapes differ"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn shape_matches(&self, lattice: &OutputLattice) -> bool {
        (self.frames, self.labels, self.vocab) == (lattice.frames(), lattice.labels(), lattice.vocab())
    }
}

fn check_inputs(lattice: &OutputLattice, y: &TokenSeq) -> Result<()> {
    if y.len() != lattice.labels() {
        return Err(Error::shape(format!(
            "label sequence has {} tokens but lattice has U={}",
            y.len(),
            lattice.labels()
        )));
    }
    y.check_vocab(crate::lattice::Vocab::new(lattice.vocab())?)
}

/// Runs forward-backward and returns `(-log p(y|X), table)`.
pub fn transducer_nll(lattice: &OutputLattice, y: &TokenSeq) -> Result<(f64, ForwardBackward)> {
    check_inputs(lattice, y)?;
    let (frames, labels) = (lattice.frames(), lattice.labels());
    let ys = y.as_slice();
    let width = labels + 1;
    let mut alpha = vec![f64::NEG_INFINITY; frames * width];
    let mut beta = vec![f64::NEG_INFINITY; frames * width];

    for t in 0..frames {
        for u in 0..=labels {
            let a = if t == 0 && u == 0 {
                0.0
            } else {
                let from_blank = if t > 0 {
                    alpha[(t - 1) * width + u] + lattice.node_logprob(t - 1, u, BLANK)
                } else {
                    f64::NEG_INFINITY
                };
                let from_label = if u > 0 {
                    alpha[t * width + u - 1] + lattice.node_logprob(t, u - 1, ys[u - 1])
                } else {
                    f64::NEG_INFINITY
                };
                log_add(from_blank, from_label)
            };
            alpha[t * width + u] = a;
        }
    }

    for t in (0..frames).rev() {
        for u in (0..=labels).rev() {
            let b = if t == frames - 1 && u == labels {
                lattice.node_logprob(t, u, BLANK)
            } else {
                let via_blank = if t + 1 < frames {
                    beta[(t + 1) * width + u] + lattice.node_logprob(t, u, BLANK)
                } else {
                    f64::NEG_INFINITY
                };
                let via_label = if u < labels {
                    beta[t * width + u + 1] + lattice.node_logprob(t, u, ys[u])
                } else {
                    f64::NEG_INFINITY
                };
                log_add(via_blank, via_label)
            };
            beta[t * width + u] = b;
        }
    }

    let total = alpha[(frames - 1) * width + labels] + lattice.node_logprob(frames - 1, labels, BLANK);
    let table = ForwardBackward {
        frames,
        labels,
        alpha,
        beta,
        total_logprob: total,
    };
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("transducer log-likelihood is {total}")));
    }
    Ok((-total, table))
}

/// Gradient of `-log p(y|X)` with respect to the pre-softmax logits that
/// produced `lattice`.
///
/// At each node the gradient is `p(k|t,u)·γ(t,u) − γ_k(t,u)`, where `γ` is the
/// node occupancy and `γ_k` the posterior of leaving the node via `k`.
pub fn transducer_nll_grad(lattice: &OutputLattice, y: &TokenSeq) -> Result<LatticeGradient> {
    let (_, fb) = transducer_nll(lattice, y)?;
    Ok(grad_from_table(lattice, y, &fb))
}

/// Loss and gradient in one pass.
pub fn transducer_nll_with_grad(lattice: &OutputLattice, y: &TokenSeq) -> Result<(f64, LatticeGradient)> {
    let (loss, fb) = transducer_nll(lattice, y)?;
    Ok((loss, grad_from_table(lattice, y, &fb)))
}

fn grad_from_table(lattice: &OutputLattice, y: &TokenSeq, fb: &ForwardBackward) -> LatticeGradient {
    let (frames, labels) = (lattice.frames(), lattice.labels());
    let ys = y.as_slice();
    let total = fb.total_logprob;
    let mut grad = LatticeGradient::zeros_like(lattice);
    for t in 0..frames {
        for u in 0..=labels {
            let a = fb.alpha(t, u);
            let occupancy = (a + fb.beta(t, u) - total).exp();
            let dist = lattice.node(t, u);
            let g = grad.node_mut(t, u);
            for (gk, lp) in g.iter_mut().zip(dist) {
                *gk = lp.exp() * occupancy;
            }
            let after_blank = if t + 1 < frames {
                fb.beta(t + 1, u)
            } else if u == labels {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            g[BLANK] -= (a + dist[BLANK] + after_blank - total).exp();
            if u < labels {
                let k = ys[u];
                g[k] -= (a + dist[k] + fb.beta(t, u + 1) - total).exp();
            }
        }
    }
    grad
}

/// Most likely alignment of `y` and its log score.
///
/// When both incoming transitions of a node score equally the blank one
/// (from the previous frame) wins.
pub fn viterbi_alignment(lattice: &OutputLattice, y: &TokenSeq) -> Result<(Alignment, f64)> {
    check_inputs(lattice, y)?;
    let (frames, labels) = (lattice.frames(), lattice.labels());
    let ys = y.as_slice();
    let width = labels + 1;
    let mut delta = vec![f64::NEG_INFINITY; frames * width];
    // true: reached via label from (t, u-1); false: via blank from (t-1, u).
    let mut via_label = vec![false; frames * width];

    for t in 0..frames {
        for u in 0..=labels {
            if t == 0 && u == 0 {
                delta[0] = 0.0;
                continue;
            }
            let from_blank = if t > 0 {
                delta[(t - 1) * width + u] + lattice.node_logprob(t - 1, u, BLANK)
            } else {
                f64::NEG_INFINITY
            };
            let from_label = if u > 0 {
                delta[t * width + u - 1] + lattice.node_logprob(t, u - 1, ys[u - 1])
            } else {
                f64::NEG_INFINITY
            };
            let i = t * width + u;
            if from_label > from_blank {
                delta[i] = from_label;
                via_label[i] = true;
            } else {
                delta[i] = from_blank;
            }
        }
    }

    let score = delta[(frames - 1) * width + labels] + lattice.node_logprob(frames - 1, labels, BLANK);
    if score == f64::NEG_INFINITY || score.is_nan() {
        return Err(Error::NonFinite("no alignment with non-zero probability".into()));
    }

    let mut steps = Vec::with_capacity(frames + labels);
    steps.push(Step {
        t: frames - 1,
        u: labels,
        k: BLANK,
    });
    let (mut t, mut u) = (frames - 1, labels);
    while (t, u) != (0, 0) {
        if via_label[t * width + u] {
            u -= 1;
            steps.push(Step { t, u, k: ys[u] });
        } else {
            t -= 1;
            steps.push(Step { t, u, k: BLANK });
        }
    }
    steps.reverse();
    Ok((Alignment::from_steps_unchecked(steps), score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::logsumexp;

    fn seq(v: &[usize]) -> TokenSeq {
        TokenSeq::new(v.to_vec()).unwrap()
    }

    #[test]
    fn single_alignment_loss() {
        let l = OutputLattice::from_log_probs(1, 0, 2, vec![0.7f64.ln(), 0.3f64.ln()]).unwrap();
        let (loss, fb) = transducer_nll(&l, &TokenSeq::empty()).unwrap();
        assert!((loss - 0.356_674_943_938_732_4).abs() < 1e-12);
        assert_eq!(fb.alpha(0, 0), 0.0);
    }

    #[test]
    fn uniform_lattice_loss() {
        // The label goes out at frame 0 or frame 1: two alignments of three
        // factors 1/3 each.
        let l = OutputLattice::uniform(2, 1, 3).unwrap();
        let (loss, _) = transducer_nll(&l, &seq(&[1])).unwrap();
        assert!((loss - 13.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn table_invariants() {
        let l = OutputLattice::from_logits(4, 3, 5, (0..80).map(|i| ((i * 7919) % 13) as f64 * 0.3 - 1.5).collect())
            .unwrap();
        let y = seq(&[3, 1, 4]);
        let (loss, fb) = transducer_nll(&l, &y).unwrap();
        assert_eq!(fb.alpha(0, 0), 0.0);
        assert!((fb.beta(0, 0) + loss).abs() < 1e-12);
        let end = fb.alpha(3, 3) + l.node_logprob(3, 3, BLANK);
        assert!((end - fb.total_logprob()).abs() < 1e-9);
        for t in 0..4 {
            for u in 0..=3 {
                assert!(fb.alpha(t, u) + fb.beta(t, u) <= fb.total_logprob() + 1e-9);
                let occ = fb.occupancy(t, u);
                assert!((0.0..=1.0 + 1e-9).contains(&occ));
            }
            // Every path leaves frame t through exactly one blank.
            let mut leave = Vec::new();
            for u in 0..=3 {
                let after = if t + 1 < 4 { fb.beta(t + 1, u) } else if u == 3 { 0.0 } else { f64::NEG_INFINITY };
                leave.push(fb.alpha(t, u) + l.node_logprob(t, u, BLANK) + after - fb.total_logprob());
            }
            assert!(logsumexp(&leave).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_frames_and_length_mismatch() {
        assert!(OutputLattice::uniform(0, 1, 3).is_err());
        let l = OutputLattice::uniform(2, 1, 3).unwrap();
        assert!(transducer_nll(&l, &seq(&[1, 2])).is_err());
        assert!(transducer_nll(&l, &seq(&[3])).is_err());
    }

    #[test]
    fn single_alignment_gradient_is_cross_entropy() {
        let probs = [0.6f64, 0.1, 0.3];
        let l = OutputLattice::from_log_probs(1, 0, 3, probs.iter().map(|p| p.ln()).collect()).unwrap();
        let g = transducer_nll_grad(&l, &TokenSeq::empty()).unwrap();
        let expected = [0.6 - 1.0, 0.1, 0.3];
        for (a, b) in g.node(0, 0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let l = OutputLattice::from_logits(3, 2, 4, (0..36).map(|i| (i as f64 * 1.3).sin() * 2.0).collect()).unwrap();
        let g = transducer_nll_grad(&l, &seq(&[2, 3])).unwrap();
        for t in 0..3 {
            for u in 0..=2 {
                assert!(g.node(t, u).iter().sum::<f64>().abs() < 1e-8);
            }
        }
    }

    #[test]
    fn viterbi_trivial() {
        let l = OutputLattice::from_log_probs(1, 0, 2, vec![0.7f64.ln(), 0.3f64.ln()]).unwrap();
        let (a, s) = viterbi_alignment(&l, &TokenSeq::empty()).unwrap();
        assert_eq!(a.steps(), &[Step { t: 0, u: 0, k: 0 }]);
        assert_eq!(s, 0.7f64.ln());
    }

    #[test]
    fn viterbi_tie_prefers_blank() {
        // Uniform lattice: every alignment ties. Preferring the blank
        // predecessor during traceback walks back along frames first, so the
        // label lands on the earliest frame.
        let l = OutputLattice::uniform(3, 1, 3).unwrap();
        let (a, _) = viterbi_alignment(&l, &seq(&[2])).unwrap();
        let ks: Vec<_> = a.steps().iter().map(|s| (s.t, s.u, s.k)).collect();
        assert_eq!(ks, vec![(0, 0, 2), (0, 1, 0), (1, 1, 0), (2, 1, 0)]);
    }
}
