//! Sinusoidal position codes for the diffusion step and the frame index.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const MAX_PERIOD: f64 = 10_000.0;

/// Interleaved `[sin(p w_0), cos(p w_0), sin(p w_1), cos(p w_1), ...]` with
/// geometrically spaced frequencies `w_i = MAX_PERIOD^(-i / (dim/2))`.
pub fn sinusoidal(position: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding width must be positive and even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-MAX_PERIOD.ln() * i as f64 / half as f64).exp();
        let arg = position * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Embedding of a diffusion step.
pub fn time_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    sinusoidal(t as f64, dim)
}

/// Embedding of a frame's position within the clip.
pub fn frame_embed(frame_index: usize, dim: usize) -> Result<Vec<f64>> {
    sinusoidal(frame_index as f64, dim)
}

/// `[N, dim]` table of step embeddings.
pub(crate) fn time_table<F: Element>(steps: &[usize], dim: usize) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        data.extend(time_embed(t, dim)?.into_iter().map(F::of));
    }
    Tensor::from_vec(&[steps.len(), dim], data)
}

/// `[K, dim]` table of frame embeddings.
pub(crate) fn frame_table<F: Element>(frames: usize, dim: usize) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(frames * dim);
    for k in 0..frames {
        data.extend(frame_embed(k, dim)?.into_iter().map(F::of));
    }
    Tensor::from_vec(&[frames, dim], data)
}
