//! Full-lattice forward pass with recorded intermediates, and the matching
//! reverse-mode pass.

use super::model::{Gradient, TransducerModel};
use super::ops::{matvec_t_add, outer_add, tanh_backward};
use crate::corpus::Features;
use crate::error::{Error, Result};
use crate::lattice::{OutputLattice, TokenSeq, BLANK};
use crate::transducer::LatticeGradient;

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    version: u64,
    frames: usize,
    stacked: Vec<f64>,
    /// Encoder layer outputs; the last one is `f`.
    enc: Vec<Vec<f64>>,
    /// Prediction network inputs: blank (start symbol) then the labels.
    pred_tokens: Vec<usize>,
    /// `g_0..=g_U`.
    pred: Vec<f64>,
    /// Joint activations `tanh(W_f f_t + b + W_g g_u)`, `(t, u, j)` order.
    act: Vec<f64>,
    lattice: OutputLattice,
}

impl ForwardTape {
    pub fn lattice(&self) -> &OutputLattice {
        &self.lattice
    }

    pub fn into_lattice(self) -> OutputLattice {
        self.lattice
    }

    /// Encoder output at frame `t`.
    pub fn encoder_output(&self, t: usize) -> &[f64] {
        let f = self.enc.last().expect("encoder output");
        let e = f.len() / self.frames;
        &f[t * e..(t + 1) * e]
    }
}

impl TransducerModel {
    /// Computes the output lattice for `x` against labels `y`, recording
    /// intermediates for [`backward`](Self::backward).
    pub fn forward(&self, x: &Features, y: &TokenSeq) -> Result<ForwardTape> {
        self.check_features(x)?;
        y.check_vocab(crate::lattice::Vocab::new(self.vocab())?)?;
        let cfg = self.config();
        let p = self.params();
        let frames = x.frames();
        let labels = y.len();
        let stacked = self.stack_frames(x);
        let enc = self.encoder_activations(&stacked, frames);
        let f = enc.last().expect("encoder output");

        let mut pred_tokens = Vec::with_capacity(labels + 1);
        pred_tokens.push(BLANK);
        pred_tokens.extend_from_slice(y.as_slice());
        let ph = cfg.pred_hidden;
        let mut pred = Vec::with_capacity((labels + 1) * ph);
        for (u, &tok) in pred_tokens.iter().enumerate() {
            let prev = (u > 0).then(|| &pred[(u - 1) * ph..u * ph]);
            let h = self.pred_hidden_step(prev, tok);
            pred.extend_from_slice(&h);
        }

        let (j, e, k) = (cfg.joint_hidden, cfg.enc_dim, cfg.vocab);
        let mut jf = vec![0.0; frames * j];
        for t in 0..frames {
            self.layout.joint_enc.apply(p, &f[t * e..(t + 1) * e], &mut jf[t * j..(t + 1) * j]);
        }
        let jg: Vec<f64> = (0..=labels).flat_map(|u| self.pred_joint(&pred[u * ph..(u + 1) * ph])).collect();

        let nodes = frames * (labels + 1);
        let mut act = vec![0.0; nodes * j];
        let mut logits = vec![0.0; nodes * k];
        for t in 0..frames {
            for u in 0..=labels {
                let n = t * (labels + 1) + u;
                let a = &mut act[n * j..(n + 1) * j];
                self.joint_hidden(&jf[t * j..(t + 1) * j], &jg[u * j..(u + 1) * j], a);
                self.layout.joint_out.apply(p, a, &mut logits[n * k..(n + 1) * k]);
            }
        }
        let lattice = OutputLattice::from_logits(frames, labels, k, logits)?;
        Ok(ForwardTape {
            version: self.version(),
            frames,
            stacked,
            enc,
            pred_tokens,
            pred,
            act,
            lattice,
        })
    }

    /// Lattice only, no tape.
    pub fn forward_lattice(&self, x: &Features, y: &TokenSeq) -> Result<OutputLattice> {
        Ok(self.forward(x, y)?.into_lattice())
    }

    /// Chain-rule gradient of all parameters given the gradient with respect
    /// to the lattice logits.
    pub fn backward(&self, tape: &ForwardTape, lattice_grad: &LatticeGradient) -> Result<Gradient> {
        let mut grad = Gradient::zeros(self.num_params());
        self.backward_into(tape, lattice_grad, &mut grad)?;
        Ok(grad)
    }

    /// Like [`backward`](Self::backward) but accumulates into `grad`.
    pub fn backward_into(&self, tape: &ForwardTape, lattice_grad: &LatticeGradient, grad: &mut Gradient) -> Result<()> {
        if tape.version != self.version() {
            return Err(Error::StaleTape("parameters changed since the forward pass".into()));
        }
        if !lattice_grad.shape_matches(&tape.lattice) {
            return Err(Error::StaleTape("lattice gradient does not match the recorded forward pass".into()));
        }
        if grad.len() != self.num_params() {
            return Err(Error::shape("gradient buffer has the wrong length"));
        }
        let cfg = self.config();
        let p = self.params();
        let layout = &self.layout;
        let g = &mut grad.0;
        let frames = tape.frames;
        let labels = tape.lattice.labels();
        let (j, e, k, ph) = (cfg.joint_hidden, cfg.enc_dim, cfg.vocab, cfg.pred_hidden);
        let f = tape.enc.last().expect("encoder output");

        // Joint.
        let out = layout.joint_out;
        let w_out = out.weight(p);
        let mut d_jf = vec![0.0; frames * j];
        let mut d_jg = vec![0.0; (labels + 1) * j];
        let mut d_act = vec![0.0; j];
        for t in 0..frames {
            for u in 0..=labels {
                let dz = lattice_grad.node(t, u);
                if dz.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let n = t * (labels + 1) + u;
                let a = &tape.act[n * j..(n + 1) * j];
                outer_add(&mut g[out.w..out.w + k * j], dz, a);
                for (gb, &d) in g[out.b..out.b + k].iter_mut().zip(dz) {
                    *gb += d;
                }
                d_act.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_add(w_out, k, j, dz, &mut d_act);
                tanh_backward(&mut d_act, a);
                for ((df, dg), &d) in d_jf[t * j..(t + 1) * j]
                    .iter_mut()
                    .zip(&mut d_jg[u * j..(u + 1) * j])
                    .zip(&d_act)
                {
                    *df += d;
                    *dg += d;
                }
            }
        }

        // Joint projections of encoder and prediction outputs.
        let je = layout.joint_enc;
        let mut d_f = vec![0.0; frames * e];
        for t in 0..frames {
            let d = &d_jf[t * j..(t + 1) * j];
            outer_add(&mut g[je.w..je.w + j * e], d, &f[t * e..(t + 1) * e]);
            for (gb, &v) in g[je.b..je.b + j].iter_mut().zip(d) {
                *gb += v;
            }
            matvec_t_add(je.weight(p), j, e, d, &mut d_f[t * e..(t + 1) * e]);
        }
        let jp = layout.joint_pred;
        let w_jp = &p[jp..jp + j * ph];
        let mut d_pred = vec![0.0; (labels + 1) * ph];
        for u in 0..=labels {
            let d = &d_jg[u * j..(u + 1) * j];
            outer_add(&mut g[jp..jp + j * ph], d, &tape.pred[u * ph..(u + 1) * ph]);
            matvec_t_add(w_jp, j, ph, d, &mut d_pred[u * ph..(u + 1) * ph]);
        }

        // Prediction network, backpropagated through its recurrence.
        let cell = layout.pred;
        let pe = cfg.pred_embed;
        let mut carry = vec![0.0; ph];
        for u in (0..=labels).rev() {
            let h = &tape.pred[u * ph..(u + 1) * ph];
            let mut d = d_pred[u * ph..(u + 1) * ph].to_vec();
            super::ops::add_assign(&mut d, &carry);
            tanh_backward(&mut d, h);
            let tok = tape.pred_tokens[u];
            let emb_at = layout.embed + tok * pe;
            let emb = &p[emb_at..emb_at + pe];
            outer_add(&mut g[cell.input.w..cell.input.w + ph * pe], &d, emb);
            for (gb, &v) in g[cell.input.b..cell.input.b + ph].iter_mut().zip(&d) {
                *gb += v;
            }
            let mut d_emb = vec![0.0; pe];
            matvec_t_add(cell.input.weight(p), ph, pe, &d, &mut d_emb);
            super::ops::add_assign(&mut g[emb_at..emb_at + pe], &d_emb);
            carry.iter_mut().for_each(|v| *v = 0.0);
            if u > 0 {
                let prev = &tape.pred[(u - 1) * ph..u * ph];
                outer_add(&mut g[cell.rec..cell.rec + ph * ph], &d, prev);
                matvec_t_add(cell.rec_weight(p), ph, ph, &d, &mut carry);
            }
        }

        // Encoder output layer.
        let eo = layout.enc_out;
        let (in_acts, in_width) = match tape.enc.len() {
            1 => (&tape.stacked, cfg.stacked_dim()),
            n => (&tape.enc[n - 2], cfg.enc_hidden * cfg.directions()),
        };
        let mut d_in = vec![0.0; frames * in_width];
        for t in 0..frames {
            let d = &mut d_f[t * e..(t + 1) * e];
            tanh_backward(d, &f[t * e..(t + 1) * e]);
            outer_add(&mut g[eo.w..eo.w + e * in_width], d, &in_acts[t * in_width..(t + 1) * in_width]);
            for (gb, &v) in g[eo.b..eo.b + e].iter_mut().zip(d.iter()) {
                *gb += v;
            }
            matvec_t_add(eo.weight(p), e, in_width, d, &mut d_in[t * in_width..(t + 1) * in_width]);
        }

        // Recurrent encoder layers, last to first.
        let h = cfg.enc_hidden;
        for (l, dirs) in layout.enc_layers.iter().enumerate().rev() {
            let out_acts = &tape.enc[l];
            let width = h * dirs.len();
            let (x_acts, x_width) = if l == 0 {
                (&tape.stacked, cfg.stacked_dim())
            } else {
                (&tape.enc[l - 1], h * layout.enc_layers[l - 1].len())
            };
            let mut d_x = vec![0.0; frames * x_width];
            for (dir, cell) in dirs.iter().enumerate() {
                // Reverse of the forward visiting order.
                let order: Vec<usize> = if dir == 0 {
                    (0..frames).rev().collect()
                } else {
                    (0..frames).collect()
                };
                let mut carry = vec![0.0; h];
                for (i, &t) in order.iter().enumerate() {
                    let hs = &out_acts[t * width + dir * h..t * width + (dir + 1) * h];
                    let mut d = d_in[t * width + dir * h..t * width + (dir + 1) * h].to_vec();
                    super::ops::add_assign(&mut d, &carry);
                    tanh_backward(&mut d, hs);
                    let x = &x_acts[t * x_width..(t + 1) * x_width];
                    outer_add(&mut g[cell.input.w..cell.input.w + h * x_width], &d, x);
                    for (gb, &v) in g[cell.input.b..cell.input.b + h].iter_mut().zip(&d) {
                        *gb += v;
                    }
                    if l > 0 {
                        matvec_t_add(cell.input.weight(p), h, x_width, &d, &mut d_x[t * x_width..(t + 1) * x_width]);
                    }
                    carry.iter_mut().for_each(|v| *v = 0.0);
                    // The step that produced `hs` read the previous step's state.
                    if let Some(&prev_t) = order.get(i + 1) {
                        let prev = &out_acts[prev_t * width + dir * h..prev_t * width + (dir + 1) * h];
                        outer_add(&mut g[cell.rec..cell.rec + h * h], &d, prev);
                        matvec_t_add(cell.rec_weight(p), h, h, &d, &mut carry);
                    }
                }
            }
            d_in = d_x;
        }
        Ok(())
    }
}

/// Forward-only helper for tests and probes: encoder output rows.
pub fn encoder_outputs(model: &TransducerModel, x: &Features) -> Result<Vec<Vec<f64>>> {
    let enc = model.encode(x)?;
    Ok((0..enc.frames()).map(|t| enc.encoder_output(t).to_vec()).collect())
}
