//! Minimal differentiable transducer: stacked-context Elman encoder
//! (optionally bidirectional), recurrent prediction network, and an
//! add-tanh-project joint with log-softmax output. Gradients are computed by
//! hand-written reverse passes over a recorded [`ForwardTape`].

mod model;
mod ops;
mod tape;

pub use model::{EncodedFrames, Gradient, ModelConfig, PredState, TransducerModel};
pub use tape::{encoder_outputs, ForwardTape};

use crate::error::{Error, Result};

/// Rescales `grad` so its global L2 norm is at most `clip`. Returns the norm
/// before clipping. A non-positive `clip` disables clipping.
pub fn clip_gradient(grad: &mut Gradient, clip: f64) -> f64 {
    let norm = grad.norm();
    if clip > 0.0 && norm > clip {
        grad.scale(clip / norm);
    }
    norm
}

/// Global-norm clip followed by `θ ← θ − lr·g`.
///
/// Refuses non-finite gradients and leaves the model untouched in that case.
pub fn sgd_step(model: &mut TransducerModel, grad: &Gradient, lr: f64, clip: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
    }
    if grad.len() != model.num_params() {
        return Err(Error::shape("gradient and model sizes differ"));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
    }
    let mut g = grad.clone();
    clip_gradient(&mut g, clip);
    for (p, d) in model.params_mut().iter_mut().zip(&g.0) {
        *p -= lr * d;
    }
    Ok(())
}
