//! Small building blocks shared by the model components.

use rand::Rng;

use super::params::xavier;
use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { weight, bias, fan_in, fan_out }
    }

    /// `x` is `[n, fan_in]`; returns `[n, fan_out]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gain)?;
        let b = tape.param(self.bias)?;
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product self-attention without positional terms.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub width: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: store.add(format!("{name}.wq"), xavier(rng, width, width)),
            key: store.add(format!("{name}.wk"), xavier(rng, width, width)),
            value: store.add(format!("{name}.wv"), xavier(rng, width, width)),
            output: store.add(format!("{name}.wo"), xavier(rng, width, width)),
            width,
            heads,
        })
    }

    /// `x` is `[tokens, width]`; returns `[tokens, width]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let wq = tape.param(self.query)?;
        let wk = tape.param(self.key)?;
        let wv = tape.param(self.value)?;
        let wo = tape.param(self.output)?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let hd = self.width / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale)?;
            let attn = tape.softmax(logits)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat(&outs)? };
        tape.matmul(merged, wo)
    }
}
