use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{matvec_add, tanh_in_place};
use crate::corpus::Features;
use crate::error::{Error, Result};
use crate::lattice::{log_softmax_in_place, BLANK};

/// Hyperparameters of a transducer: encoder, prediction network and joint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Output vocabulary size `K`, blank included.
    pub vocab: usize,
    /// Past frames stacked onto each encoder input.
    pub left_context: usize,
    /// Future frames stacked onto each encoder input.
    pub lookahead: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub bidirectional: bool,
    pub enc_dim: usize,
    pub pred_embed: usize,
    pub pred_hidden: usize,
    pub joint_hidden: usize,
    /// A streaming encoder never reads future frames.
    pub streaming: bool,
}

impl ModelConfig {
    /// The large non-streaming model.
    pub fn teacher(input_dim: usize, vocab: usize) -> Self {
        Self {
            input_dim,
            vocab,
            left_context: 2,
            lookahead: 2,
            enc_hidden: 64,
            enc_layers: 2,
            bidirectional: true,
            enc_dim: 64,
            pred_embed: 16,
            pred_hidden: 32,
            joint_hidden: 48,
            streaming: false,
        }
    }

    /// The small student. Streaming students are strictly causal.
    pub fn student(input_dim: usize, vocab: usize, streaming: bool) -> Self {
        Self {
            input_dim,
            vocab,
            left_context: 2,
            lookahead: if streaming { 0 } else { 2 },
            enc_hidden: 16,
            enc_layers: 1,
            bidirectional: !streaming,
            enc_dim: 16,
            pred_embed: 8,
            pred_hidden: 16,
            joint_hidden: 16,
            streaming,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocabulary K={} < 2", self.vocab)));
        }
        let dims = [
            self.input_dim,
            self.enc_dim,
            self.pred_embed,
            self.pred_hidden,
            self.joint_hidden,
        ];
        if dims.contains(&0) || (self.enc_layers > 0 && self.enc_hidden == 0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.streaming && (self.lookahead > 0 || self.bidirectional) {
            return Err(Error::Config(
                "a streaming encoder cannot use look-ahead frames or a backward recurrence".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn stacked_dim(&self) -> usize {
        self.input_dim * (self.left_context + self.lookahead + 1)
    }

    pub(crate) fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }
}

/// Affine map `rows × cols` plus bias, located in the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Dense {
    pub fn weight<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.rows * self.cols]
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.rows]
    }

    /// `out = W x + b`.
    pub fn apply(&self, p: &[f64], x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.bias(p));
        matvec_add(self.weight(p), self.rows, self.cols, x, out);
    }
}

/// Elman recurrence `h_t = tanh(W x_t + R h_prev + b)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Recurrent {
    pub input: Dense,
    pub rec: usize,
}

impl Recurrent {
    pub fn hidden(&self) -> usize {
        self.input.rows
    }

    pub fn rec_weight<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        let h = self.hidden();
        &p[self.rec..self.rec + h * h]
    }

    pub fn step(&self, p: &[f64], x: &[f64], prev: Option<&[f64]>, out: &mut [f64]) {
        self.input.apply(p, x, out);
        if let Some(prev) = prev {
            let h = self.hidden();
            matvec_add(self.rec_weight(p), h, h, prev, out);
        }
        tanh_in_place(out);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    /// `[layer][direction]`; direction 1 runs backwards in time.
    pub enc_layers: Vec<Vec<Recurrent>>,
    pub enc_out: Dense,
    pub embed: usize,
    pub pred: Recurrent,
    pub joint_enc: Dense,
    pub joint_pred: usize,
    pub joint_out: Dense,
    /// `(offset, len, fan_in)` of every parameter block, for initialisation.
    pub blocks: Vec<(usize, usize, usize)>,
    pub total: usize,
}

struct Cursor {
    next: usize,
    blocks: Vec<(usize, usize, usize)>,
}

impl Cursor {
    fn take(&mut self, len: usize, fan_in: usize) -> usize {
        let at = self.next;
        self.blocks.push((at, len, fan_in));
        self.next += len;
        at
    }

    fn dense(&mut self, rows: usize, cols: usize, fan_in: usize) -> Dense {
        let w = self.take(rows * cols, fan_in);
        let b = self.take(rows, fan_in);
        Dense { w, b, rows, cols }
    }

    fn recurrent(&mut self, hidden: usize, input: usize) -> Recurrent {
        let fan_in = input + hidden;
        let input = self.dense(hidden, input, fan_in);
        let rec = self.take(hidden * hidden, fan_in);
        Recurrent { input, rec }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut c = Cursor {
            next: 0,
            blocks: Vec::new(),
        };
        let mut enc_layers = Vec::with_capacity(cfg.enc_layers);
        let mut width = cfg.stacked_dim();
        for _ in 0..cfg.enc_layers {
            let dirs = (0..cfg.directions()).map(|_| c.recurrent(cfg.enc_hidden, width)).collect();
            enc_layers.push(dirs);
            width = cfg.enc_hidden * cfg.directions();
        }
        let enc_out = c.dense(cfg.enc_dim, width, width);
        let embed = c.take(cfg.vocab * cfg.pred_embed, 1);
        let pred = c.recurrent(cfg.pred_hidden, cfg.pred_embed);
        let joint_enc = c.dense(cfg.joint_hidden, cfg.enc_dim, cfg.enc_dim + cfg.pred_hidden);
        let joint_pred = c.take(cfg.joint_hidden * cfg.pred_hidden, cfg.enc_dim + cfg.pred_hidden);
        let joint_out = c.dense(cfg.vocab, cfg.joint_hidden, cfg.joint_hidden);
        Self {
            enc_layers,
            enc_out,
            embed,
            pred,
            joint_enc,
            joint_pred,
            joint_out,
            blocks: c.blocks,
            total: c.next,
        }
    }
}

/// Parameter gradient, same layout as the model's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add(&mut self, other: &Gradient) {
        super::ops::add_assign(&mut self.0, &other.0);
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            *g *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Encoder `F`, prediction network `G` and joint `J` sharing one flat
/// parameter vector.
#[derive(Debug, Clone)]
pub struct TransducerModel {
    config: ModelConfig,
    pub(crate) layout: Layout,
    params: Vec<f64>,
    /// Bumped on every parameter mutation so stale tapes are detectable.
    version: u64,
}

impl PartialEq for TransducerModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Decoder state after consuming a label prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PredState {
    pub(crate) hidden: Vec<f64>,
    /// Joint projection of `hidden`, cached for repeated joint evaluation.
    pub(crate) joint: Vec<f64>,
}

/// Encoder output already projected into the joint space, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrames {
    pub(crate) frames: usize,
    pub(crate) width: usize,
    pub(crate) joint: Vec<f64>,
    pub(crate) enc: Vec<f64>,
}

impl EncodedFrames {
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Raw encoder output `f_t`.
    pub fn encoder_output(&self, t: usize) -> &[f64] {
        let e = self.enc.len() / self.frames;
        &self.enc[t * e..(t + 1) * e]
    }

    pub(crate) fn joint_row(&self, t: usize) -> &[f64] {
        &self.joint[t * self.width..(t + 1) * self.width]
    }
}

impl TransducerModel {
    /// Uniform(−s, s) initialisation with `s = 1/√fan_in`, seeded.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        for &(at, len, fan_in) in &layout.blocks {
            let s = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[at..at + len] {
                *p = rng.random_range(-s..s);
            }
        }
        Ok(Self {
            config,
            layout,
            params,
            version: 0,
        })
    }

    /// All parameters zero: every lattice node is uniform.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![0.0; layout.total];
        Ok(Self {
            config,
            layout,
            params,
            version: 0,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::shape(format!(
                "model needs {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub(crate) fn version(&self) -> u64 {
        self.version
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub(crate) fn check_features(&self, x: &Features) -> Result<()> {
        if x.dim() != self.config.input_dim {
            return Err(Error::shape(format!(
                "features have dimension {}, model expects {}",
                x.dim(),
                self.config.input_dim
            )));
        }
        if x.frames() == 0 {
            return Err(Error::invalid("utterance with zero frames"));
        }
        Ok(())
    }

    /// Input frames with context stacked, zero-padded at the edges.
    pub(crate) fn stack_frames(&self, x: &Features) -> Vec<f64> {
        let (frames, d) = (x.frames(), x.dim());
        let left = self.config.left_context as isize;
        let right = self.config.lookahead as isize;
        let width = self.config.stacked_dim();
        let mut out = vec![0.0; frames * width];
        for t in 0..frames {
            let row = &mut out[t * width..(t + 1) * width];
            for (slot, off) in (-left..=right).enumerate() {
                let src = t as isize + off;
                if src >= 0 && (src as usize) < frames {
                    row[slot * d..(slot + 1) * d].copy_from_slice(x.frame(src as usize));
                }
            }
        }
        out
    }

    /// Runs the encoder, returning every layer's activations. The last entry
    /// is the encoder output `f` (after tanh).
    pub(crate) fn encoder_activations(&self, stacked: &[f64], frames: usize) -> Vec<Vec<f64>> {
        let p = &self.params;
        let mut acts = Vec::with_capacity(self.layout.enc_layers.len() + 1);
        let mut input = stacked.to_vec();
        let mut in_width = self.config.stacked_dim();
        for dirs in &self.layout.enc_layers {
            let h = self.config.enc_hidden;
            let width = h * dirs.len();
            let mut out = vec![0.0; frames * width];
            for (d, cell) in dirs.iter().enumerate() {
                let order: Box<dyn Iterator<Item = usize>> = if d == 0 {
                    Box::new(0..frames)
                } else {
                    Box::new((0..frames).rev())
                };
                let mut prev: Option<usize> = None;
                let mut buf = vec![0.0; h];
                for t in order {
                    let x = &input[t * in_width..(t + 1) * in_width];
                    let prev_h = prev.map(|pt| &out[pt * width + d * h..pt * width + (d + 1) * h]);
                    cell.step(p, x, prev_h, &mut buf);
                    out[t * width + d * h..t * width + (d + 1) * h].copy_from_slice(&buf);
                    prev = Some(t);
                }
            }
            acts.push(out.clone());
            input = out;
            in_width = width;
        }
        let e = self.config.enc_dim;
        let mut f = vec![0.0; frames * e];
        for t in 0..frames {
            let row = &mut f[t * e..(t + 1) * e];
            self.layout.enc_out.apply(p, &input[t * in_width..(t + 1) * in_width], row);
            tanh_in_place(row);
        }
        acts.push(f);
        acts
    }

    /// Encodes a whole utterance for decoding.
    pub fn encode(&self, x: &Features) -> Result<EncodedFrames> {
        self.check_features(x)?;
        let frames = x.frames();
        let stacked = self.stack_frames(x);
        let enc = self.encoder_activations(&stacked, frames).pop().expect("encoder output");
        let (j, e) = (self.config.joint_hidden, self.config.enc_dim);
        let mut joint = vec![0.0; frames * j];
        for t in 0..frames {
            self.layout
                .joint_enc
                .apply(&self.params, &enc[t * e..(t + 1) * e], &mut joint[t * j..(t + 1) * j]);
        }
        Ok(EncodedFrames {
            frames,
            width: j,
            joint,
            enc,
        })
    }

    fn embedding(&self, token: usize) -> &[f64] {
        let e = self.config.pred_embed;
        let at = self.layout.embed + token * e;
        &self.params[at..at + e]
    }

    pub(crate) fn pred_hidden_step(&self, prev: Option<&[f64]>, token: usize) -> Vec<f64> {
        let mut h = vec![0.0; self.config.pred_hidden];
        self.layout.pred.step(&self.params, self.embedding(token), prev, &mut h);
        h
    }

    pub(crate) fn pred_joint(&self, hidden: &[f64]) -> Vec<f64> {
        let (j, ph) = (self.config.joint_hidden, self.config.pred_hidden);
        let mut out = vec![0.0; j];
        let w = &self.params[self.layout.joint_pred..self.layout.joint_pred + j * ph];
        matvec_add(w, j, ph, hidden, &mut out);
        out
    }

    /// Prediction network state before any label (fed the blank as
    /// start-of-sequence symbol).
    pub fn pred_initial(&self) -> PredState {
        let hidden = self.pred_hidden_step(None, BLANK);
        let joint = self.pred_joint(&hidden);
        PredState { hidden, joint }
    }

    /// Advances the prediction network by one emitted label.
    pub fn pred_step(&self, state: &PredState, token: usize) -> PredState {
        let hidden = self.pred_hidden_step(Some(&state.hidden), token);
        let joint = self.pred_joint(&hidden);
        PredState { hidden, joint }
    }

    /// Joint hidden activation `tanh(W_f f_t + b + W_g g_u)`.
    pub(crate) fn joint_hidden(&self, enc_row: &[f64], pred_row: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(enc_row).zip(pred_row) {
            *o = (a + b).tanh();
        }
    }

    /// Log-distribution over the vocabulary at frame `t` in `state`.
    pub fn joint_log_probs(&self, enc: &EncodedFrames, t: usize, state: &PredState) -> Vec<f64> {
        let mut act = vec![0.0; self.config.joint_hidden];
        self.joint_hidden(enc.joint_row(t), &state.joint, &mut act);
        let mut logits = vec![0.0; self.config.vocab];
        self.layout.joint_out.apply(&self.params, &act, &mut logits);
        log_softmax_in_place(&mut logits);
        logits
    }

    const MAGIC: &'static [u8; 4] = b"TDKD";
    const VERSION: u32 = 1;

    /// Checkpoint: `TDKD`, version (u32), JSON hyperparameters (u32 length +
    /// bytes), parameter count (u64), then little-endian f64 parameters.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let hyper = serde_json::to_vec(&self.config)?;
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(hyper.len() as u32).to_le_bytes())?;
        w.write_all(&hyper)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != Self::VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: Self::VERSION,
            });
        }
        r.read_exact(&mut b4)?;
        let mut hyper = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut hyper)?;
        let config: ModelConfig =
            serde_json::from_slice(&hyper).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let expected = Layout::new(&config).total;
        if n != expected {
            return Err(Error::format(
                "checkpoint",
                format!("{n} parameters stored, configuration needs {expected}"),
            ));
        }
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            params.push(f64::from_le_bytes(b8));
        }
        Self::from_params(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
