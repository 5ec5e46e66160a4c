//! Distillation losses for transducers.
//!
//! Every loss is a cross-entropy against fixed teacher distributions, summed
//! over the lattice nodes it touches. Gradients are taken with respect to
//! the student's pre-softmax logits.
//!
//! * full lattice: every node of the `T × (U+1)` grid, `K` classes each;
//! * collapsed: every node, reduced to (blank, next correct label, rest);
//! * one-best: only the nodes of the teacher's best alignment, optionally
//!   shifted `tau` frames later for streaming students.

use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::lattice::{log_softmax_in_place, logsumexp, Alignment, OutputLattice, TokenSeq, BLANK, NORM_TOL};
use crate::transducer::LatticeGradient;

/// Which distillation loss a student trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdVariant {
    FullLattice,
    Collapsed,
    OneBest,
}

impl std::str::FromStr for KdVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full_lattice" => Ok(KdVariant::FullLattice),
            "collapsed" => Ok(KdVariant::Collapsed),
            "onebest" | "one_best" => Ok(KdVariant::OneBest),
            other => Err(Error::Config(format!("unknown KD variant {other:?}"))),
        }
    }
}

/// Weights of the interpolated objective `nll + lambda * kd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    pub lambda: f64,
    /// Frame delay applied to one-best targets.
    pub tau: usize,
    /// Shallow-fusion LM weight used when building targets.
    pub beta_lm: f64,
    pub variant: KdVariant,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            tau: 0,
            beta_lm: 0.0,
            variant: KdVariant::OneBest,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.beta_lm >= 0.0) || !self.beta_lm.is_finite() {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta_lm)));
        }
        Ok(())
    }
}

/// `nll + lambda * kd`.
pub fn combined_loss(nll: f64, kd: f64, lambda: f64) -> f64 {
    assert!(lambda >= 0.0, "negative interpolation weight {lambda}");
    nll + lambda * kd
}

/// Entropy (nats) of a log-distribution.
pub fn entropy(log_dist: &[f64]) -> f64 {
    cross_entropy(log_dist, log_dist)
}

/// `-Σ_k p(k) log q(k)` for log-distributions `p` and `q`. Terms with
/// `p(k) = 0` contribute nothing.
pub fn cross_entropy(target: &[f64], student: &[f64]) -> f64 {
    debug_assert_eq!(target.len(), student.len());
    let mut ce = 0.0;
    for (&lt, &ls) in target.iter().zip(student) {
        if lt != f64::NEG_INFINITY {
            ce -= lt.exp() * ls;
        }
    }
    ce
}

/// KL divergence recovered from a cross-entropy.
pub fn kl_from_ce(ce: f64, target_entropy: f64) -> f64 {
    ce - target_entropy
}

/// Adds `P_S - P_T` to a node gradient: the logit gradient of a
/// cross-entropy against a normalised target.
fn add_ce_grad(grad: &mut [f64], target: &[f64], student: &[f64]) {
    for ((g, &lt), &ls) in grad.iter_mut().zip(target).zip(student) {
        *g += ls.exp() - lt.exp();
    }
}

fn ensure_same_shape(teacher: &OutputLattice, student: &OutputLattice) -> Result<()> {
    if !teacher.same_shape(student) {
        return Err(Error::shape(format!(
            "teacher lattice {}x{}x{} vs student {}x{}x{}",
            teacher.frames(),
            teacher.labels() + 1,
            teacher.vocab(),
            student.frames(),
            student.labels() + 1,
            student.vocab()
        )));
    }
    Ok(())
}

/// Cross-entropy between teacher and student over every lattice node.
pub fn kd_full_lattice(teacher: &OutputLattice, student: &OutputLattice) -> Result<f64> {
    ensure_same_shape(teacher, student)?;
    let vocab = teacher.vocab();
    Ok(teacher
        .values()
        .chunks_exact(vocab)
        .zip(student.values().chunks_exact(vocab))
        .map(|(t, s)| cross_entropy(t, s))
        .sum())
}

pub fn kd_full_lattice_grad(teacher: &OutputLattice, student: &OutputLattice) -> Result<LatticeGradient> {
    ensure_same_shape(teacher, student)?;
    let vocab = teacher.vocab();
    let mut grad = LatticeGradient::zeros_like(student);
    for ((g, t), s) in grad
        .values_mut()
        .chunks_exact_mut(vocab)
        .zip(teacher.values().chunks_exact(vocab))
        .zip(student.values().chunks_exact(vocab))
    {
        add_ce_grad(g, t, s);
    }
    Ok(grad)
}

/// Reduces a probability vector to `(p_blank, p_correct, p_rest)`.
///
/// With `correct = None` the correct-label slot is 0.
///
/// # Panics
///
/// Panics if `correct` is blank or out of range.
pub fn collapse_node(dist: &[f64], correct: Option<usize>) -> [f64; 3] {
    let blank = dist[BLANK];
    let hit = match correct {
        Some(k) => {
            assert_ne!(k, BLANK, "correct symbol cannot be blank");
            dist[k]
        }
        None => 0.0,
    };
    [blank, hit, 1.0 - blank - hit]
}

/// Log-domain collapse used on the student side: the remainder is computed
/// by summing the remaining entries rather than by subtraction.
fn collapse_log(log_dist: &[f64], correct: Option<usize>) -> [f64; 3] {
    let mut rest = Vec::with_capacity(log_dist.len());
    for (k, &lp) in log_dist.iter().enumerate() {
        if k != BLANK && Some(k) != correct {
            rest.push(lp);
        }
    }
    let rest = if rest.is_empty() { f64::NEG_INFINITY } else { logsumexp(&rest) };
    let hit = correct.map_or(f64::NEG_INFINITY, |k| log_dist[k]);
    [log_dist[BLANK], hit, rest]
}

/// Teacher probabilities collapsed to three classes at every lattice node.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedTargetLattice {
    frames: usize,
    labels: usize,
    tokens: TokenSeq,
    nodes: Vec<[f64; 3]>,
}

impl CollapsedTargetLattice {
    /// Collapses `teacher` along the labels `y`. At `u = U` there is no next
    /// correct label, so that slot is 0.
    pub fn from_teacher(teacher: &OutputLattice, y: &TokenSeq) -> Result<Self> {
        if y.len() != teacher.labels() {
            return Err(Error::shape("label count differs from teacher lattice"));
        }
        let mut nodes = Vec::with_capacity(teacher.num_nodes());
        let mut probs = vec![0.0; teacher.vocab()];
        for t in 0..teacher.frames() {
            for u in 0..=teacher.labels() {
                for (p, lp) in probs.iter_mut().zip(teacher.node(t, u)) {
                    *p = lp.exp();
                }
                nodes.push(collapse_node(&probs, y.as_slice().get(u).copied()));
            }
        }
        Ok(Self {
            frames: teacher.frames(),
            labels: teacher.labels(),
            tokens: y.clone(),
            nodes,
        })
    }

    pub fn node(&self, t: usize, u: usize) -> [f64; 3] {
        self.nodes[t * (self.labels + 1) + u]
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    /// Number of stored target values.
    pub fn stored_values(&self) -> usize {
        3 * self.nodes.len()
    }

    fn check(&self, student: &OutputLattice, y: &TokenSeq) -> Result<()> {
        if (self.frames, self.labels) != (student.frames(), student.labels()) || y.len() != self.labels {
            return Err(Error::shape("collapsed targets, student lattice and labels disagree"));
        }
        if *y != self.tokens {
            return Err(Error::invalid("collapsed targets were built for a different label sequence"));
        }
        Ok(())
    }
}

/// Three-class cross-entropy summed over all nodes.
pub fn kd_collapsed(targets: &CollapsedTargetLattice, student: &OutputLattice, y: &TokenSeq) -> Result<f64> {
    targets.check(student, y)?;
    let mut loss = 0.0;
    for t in 0..student.frames() {
        for u in 0..=student.labels() {
            let correct = y.as_slice().get(u).copied();
            let q = collapse_log(student.node(t, u), correct);
            for (p, lq) in targets.node(t, u).into_iter().zip(q) {
                if p > 0.0 {
                    loss -= p * lq;
                }
            }
        }
    }
    Ok(loss)
}

pub fn kd_collapsed_grad(
    targets: &CollapsedTargetLattice,
    student: &OutputLattice,
    y: &TokenSeq,
) -> Result<LatticeGradient> {
    targets.check(student, y)?;
    let mut grad = LatticeGradient::zeros_like(student);
    for t in 0..student.frames() {
        for u in 0..=student.labels() {
            let correct = y.as_slice().get(u).copied();
            let dist = student.node(t, u);
            let q = collapse_log(dist, correct);
            let p = targets.node(t, u);
            let mass: f64 = p.iter().filter(|&&x| x > 0.0).sum();
            let g = grad.node_mut(t, u);
            for (k, gk) in g.iter_mut().enumerate() {
                let class = if k == BLANK {
                    0
                } else if Some(k) == correct {
                    1
                } else {
                    2
                };
                // d/dz_k of -Σ_c P_c log Q_c = p_k (Σ_c P_c - P_c(k) / Q_c(k))
                let own = if p[class] > 0.0 { p[class] * (dist[k] - q[class]).exp() } else { 0.0 };
                *gk = dist[k].exp() * mass - own;
            }
        }
    }
    Ok(grad)
}

/// Cached one-best distillation targets for one utterance: the teacher's
/// best alignment and its full log-distribution at every node on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdTargetSet {
    pub id: String,
    pub alignment: Alignment,
    #[serde(serialize_with = "ser_dists", deserialize_with = "de_dists")]
    pub dists: Vec<Vec<f64>>,
    pub fused: bool,
    pub beta: f64,
}

impl KdTargetSet {
    /// Picks the teacher distributions along `alignment`.
    pub fn from_teacher(id: impl Into<String>, teacher: &OutputLattice, alignment: Alignment) -> Result<Self> {
        let (frames, labels) = alignment.extent();
        if (frames, labels) != (teacher.frames(), teacher.labels()) {
            return Err(Error::shape(format!(
                "alignment covers T={frames} U={labels}, teacher lattice is T={} U={}",
                teacher.frames(),
                teacher.labels()
            )));
        }
        let dists = alignment.steps().iter().map(|s| teacher.node(s.t, s.u).to_vec()).collect();
        Ok(Self {
            id: id.into(),
            alignment,
            dists,
            fused: false,
            beta: 0.0,
        })
    }

    /// Number of stored target values: `K` per alignment node.
    pub fn stored_values(&self) -> usize {
        self.dists.iter().map(Vec::len).sum()
    }

    pub fn vocab(&self) -> usize {
        self.dists.first().map_or(0, Vec::len)
    }

    /// Checks node count and per-node normalisation.
    pub fn validate(&self) -> Result<()> {
        if self.dists.len() != self.alignment.len() {
            return Err(Error::shape(format!(
                "{} target distributions for {} alignment nodes",
                self.dists.len(),
                self.alignment.len()
            )));
        }
        let vocab = self.vocab();
        for (i, d) in self.dists.iter().enumerate() {
            if d.len() != vocab {
                return Err(Error::shape(format!("target node {i} has {} entries, expected {vocab}", d.len())));
            }
            let residual = logsumexp(d).abs();
            if !(residual <= NORM_TOL) {
                return Err(Error::invalid(format!("target node {i} not normalised (residual {residual:.3e})")));
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

// Log-probabilities can be -inf, which JSON numbers cannot carry.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum JsonFloat {
    Num(f64),
    Str(String),
}

impl JsonFloat {
    fn from_f64(x: f64) -> Self {
        if x.is_finite() {
            JsonFloat::Num(x)
        } else {
            JsonFloat::Str(x.to_string())
        }
    }

    fn into_f64<E: serde::de::Error>(self) -> Result<f64, E> {
        match self {
            JsonFloat::Num(x) => Ok(x),
            JsonFloat::Str(s) => s.parse().map_err(|_| E::custom(format!("bad float {s:?}"))),
        }
    }
}

fn ser_dists<S: Serializer>(dists: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<Vec<JsonFloat>> = dists
        .iter()
        .map(|r| r.iter().map(|&x| JsonFloat::from_f64(x)).collect())
        .collect();
    rows.serialize(s)
}

fn de_dists<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
    let rows: Vec<Vec<JsonFloat>> = Vec::deserialize(d)?;
    rows.into_iter()
        .map(|r| r.into_iter().map(JsonFloat::into_f64).collect())
        .collect()
}

/// Writes targets as JSON Lines, one utterance per line.
pub fn write_target_cache<W: Write>(mut w: W, targets: &[KdTargetSet]) -> Result<()> {
    for t in targets {
        writeln!(w, "{}", t.to_json_line()?)?;
    }
    Ok(())
}

pub fn read_target_cache<R: BufRead>(r: R) -> Result<Vec<KdTargetSet>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: KdTargetSet = serde_json::from_str(&line)
            .map_err(|e| Error::format("target cache", format!("line {}: {e}", n + 1)))?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

fn check_one_best(target: &KdTargetSet, student: &OutputLattice) -> Result<()> {
    let (frames, labels) = target.alignment.extent();
    if (frames, labels) != (student.frames(), student.labels()) {
        return Err(Error::shape(format!(
            "target alignment covers T={frames} U={labels}, student lattice is T={} U={}",
            student.frames(),
            student.labels()
        )));
    }
    if target.dists.len() != target.alignment.len() {
        return Err(Error::shape("target distributions do not match alignment length"));
    }
    if target.vocab() != student.vocab() {
        return Err(Error::shape("target and student vocabularies differ"));
    }
    Ok(())
}

/// One-best cross-entropy with the student read `tau` frames later.
///
/// Nodes shifted past the last frame are dropped from the sum.
pub fn kd_one_best(target: &KdTargetSet, student: &OutputLattice, tau: usize) -> Result<f64> {
    check_one_best(target, student)?;
    let frames = student.frames();
    Ok(target
        .alignment
        .steps()
        .iter()
        .zip(&target.dists)
        .filter(|(s, _)| s.t + tau < frames)
        .map(|(s, d)| cross_entropy(d, student.node(s.t + tau, s.u)))
        .sum())
}

pub fn kd_one_best_grad(target: &KdTargetSet, student: &OutputLattice, tau: usize) -> Result<LatticeGradient> {
    check_one_best(target, student)?;
    let frames = student.frames();
    let mut grad = LatticeGradient::zeros_like(student);
    for (s, d) in target.alignment.steps().iter().zip(&target.dists) {
        let t = s.t + tau;
        if t < frames {
            add_ce_grad(grad.node_mut(t, s.u), d, student.node(t, s.u));
        }
    }
    Ok(grad)
}

/// Shallow-fuses LM scores into one-best targets.
///
/// `lm_dists[i]` is the LM log-distribution for alignment node `i`; its
/// blank entry is ignored. The blank score used instead is 0 at nodes where
/// the teacher emits blank and the minimum non-blank LM log-score where it
/// emits a label.
pub fn fuse_targets(target: &KdTargetSet, lm_dists: &[Vec<f64>], beta: f64) -> Result<KdTargetSet> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("fusion weight must be >= 0, got {beta}")));
    }
    if lm_dists.len() != target.dists.len() {
        return Err(Error::shape(format!(
            "{} LM distributions for {} target nodes",
            lm_dists.len(),
            target.dists.len()
        )));
    }
    if beta == 0.0 {
        // Renormalising would only perturb the last bits.
        return Ok(KdTargetSet {
            fused: true,
            beta,
            ..target.clone()
        });
    }
    let mut dists = Vec::with_capacity(target.dists.len());
    for ((step, teacher), lm) in target.alignment.steps().iter().zip(&target.dists).zip(lm_dists) {
        if lm.len() != teacher.len() {
            return Err(Error::shape("LM and teacher vocabularies differ"));
        }
        let blank_score = if step.k == BLANK {
            0.0
        } else {
            lm[1..].iter().copied().fold(f64::INFINITY, f64::min)
        };
        let mut fused: Vec<f64> = teacher
            .iter()
            .zip(lm)
            .enumerate()
            .map(|(k, (&zt, &l))| zt + beta * if k == BLANK { blank_score } else { l })
            .collect();
        log_softmax_in_place(&mut fused);
        dists.push(fused);
    }
    Ok(KdTargetSet {
        id: target.id.clone(),
        alignment: target.alignment.clone(),
        dists,
        fused: true,
        beta,
    })
}
