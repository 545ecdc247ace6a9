//! Small parameterised building blocks shared by the decoder and head.

use rand::Rng;
use repsgg_tensor::{BoundParams, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::Result;

/// Epsilon used by every layer normalisation.
pub const LN_EPS: f64 = 1e-5;

/// Affine map `x · w + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Uniform `±1/√fan_in` weights, zero bias.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.register(format!("{prefix}.w"), Tensor::uniform(vec![d_in, d_out], bound, rng))?;
        let b = store.register(format!("{prefix}.b"), Tensor::zeros(vec![d_out]))?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        Ok(tape.linear(x, params.get(self.w), params.get(self.b))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        let gain = store.register(format!("{prefix}.gain"), Tensor::full(vec![d], 1.0))?;
        let shift = store.register(format!("{prefix}.shift"), Tensor::zeros(vec![d]))?;
        Ok(LayerNorm { gain, shift })
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, params.get(self.gain), params.get(self.shift), LN_EPS)?)
    }
}

/// Two-layer ReLU perceptron `d -> hidden -> d`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::register(store, &format!("{prefix}.up"), d, hidden, rng)?,
            down: Linear::register(store, &format!("{prefix}.down"), hidden, d, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, params, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, params, h)
    }
}

/// Splits `[rows, heads·width]` into `[heads, rows, width]`.
pub fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (rows, hd) = (s[0], s[1]);
    let x = tape.reshape(x, &[rows, heads, hd / heads])?;
    Ok(tape.permute(x, &[1, 0, 2])?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (heads, rows, width) = (s[0], s[1], s[2]);
    let x = tape.permute(x, &[1, 0, 2])?;
    Ok(tape.reshape(x, &[rows, heads * width])?)
}
