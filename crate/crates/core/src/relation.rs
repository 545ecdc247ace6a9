//! Relation head: attention logits between subject and object tokens are
//! mapped to predicate logits and a relation mask, reduced over the `K²`
//! rep-embedding pairs, and combined into final scores.

use rand::Rng;
use repsgg_tensor::{sigmoid, BoundParams, GumbelNoise, ParamId, ParamStore, Tape, Tensor, Var};

use crate::decoder::HeadShape;
use crate::error::{CoreError, Result};
use crate::layers::{split_heads, Linear};

/// Starting Gumbel-Softmax temperature.
pub const TAU_START: f64 = 10.0;
/// Final temperature.
pub const TAU_END: f64 = 0.5;
/// Fraction of training over which the temperature is annealed.
pub const TAU_ANNEAL_FRACTION: f64 = 0.3;

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub shape: HeadShape,
    pub q: Linear,
    pub k: Linear,
    /// Per-head scalar bias `[h_A]`.
    pub attn_bias: ParamId,
    pub y: Linear,
    pub h: Linear,
}

impl HeadParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        shape: HeadShape,
        predicates: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if shape.heads == 0 || shape.width == 0 {
            return Err(CoreError::Config("relation head heads and width must be >= 1".into()));
        }
        let hd = shape.total();
        Ok(HeadParams {
            shape,
            q: Linear::register(store, "head.q", d, hd, rng)?,
            k: Linear::register(store, "head.k", d, hd, rng)?,
            attn_bias: store.register("head.attn_bias", Tensor::zeros(vec![shape.heads]))?,
            y: Linear::register(store, "head.y", shape.heads, predicates, rng)?,
            h: Linear::register(store, "head.h", shape.heads, 1, rng)?,
        })
    }
}

/// `A = q kᵀ / √d_A + b_A`, shape `[h_A, nK, nK]`, with `q` from
/// `Q + Qb` and `k` from `K + Kb`.
pub fn attention_logits(
    tape: &mut Tape,
    params: &BoundParams,
    head: &HeadParams,
    q: Var,
    k: Var,
    qb: Var,
    kb: Var,
) -> Result<Var> {
    let s = tape.shape(q).to_vec();
    let (n, groups, d) = (s[0], s[1], s[2]);
    let tokens = n * groups;
    let qb = tape.reshape(qb, &[n, 1, d])?;
    let kb = tape.reshape(kb, &[n, 1, d])?;
    let qi = tape.add_broadcast(q, qb)?;
    let ki = tape.add_broadcast(k, kb)?;
    let qi = tape.reshape(qi, &[tokens, d])?;
    let ki = tape.reshape(ki, &[tokens, d])?;
    let qh = head.q.forward(tape, params, qi)?;
    let qh = split_heads(tape, qh, head.shape.heads)?;
    let kh = head.k.forward(tape, params, ki)?;
    let kh = split_heads(tape, kh, head.shape.heads)?;
    let kt = tape.transpose_last(kh)?;
    let a = tape.bmm(qh, kt)?;
    let a = tape.scale(a, 1.0 / (head.shape.width as f64).sqrt());
    let bias = tape.reshape(params.get(head.attn_bias), &[head.shape.heads, 1, 1])?;
    Ok(tape.add_broadcast(a, bias)?)
}

/// Linear maps over the head axis: `Y_full [P, nK, nK]` and `H_full [nK, nK]`.
pub fn project_heads(tape: &mut Tape, params: &BoundParams, head: &HeadParams, a: Var) -> Result<(Var, Var)> {
    let s = tape.shape(a).to_vec();
    let tokens = s[1];
    let x = tape.permute(a, &[1, 2, 0])?;
    let y = head.y.forward(tape, params, x)?;
    let y = tape.permute(y, &[2, 0, 1])?;
    let h = head.h.forward(tape, params, x)?;
    let h = tape.reshape(h, &[tokens, tokens])?;
    Ok((y, h))
}

/// `[.., nK, nK] -> [.., n, n, K²]` with pair index `a·K + b` for subject
/// token `a` and object token `b`.
pub fn rearrange_pairs(tape: &mut Tape, x: Var, n: usize, groups: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let lead: usize = s[..s.len() - 2].iter().product();
    let x = tape.reshape(x, &[lead, n, groups, n, groups])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4])?;
    let mut out: Vec<usize> = s[..s.len() - 2].to_vec();
    out.extend([n, n, groups * groups]);
    Ok(tape.reshape(x, &out)?)
}

/// How the `K²` axis is reduced.
pub enum ReduceMode<'a> {
    /// Gumbel-Softmax weighted sum of predicate logits.
    Train { tau: f64, noise: GumbelNoise<'a>, hard: bool },
    /// Max over pairs.
    Infer,
}

/// Reduced logits.
#[derive(Clone, Copy, Debug)]
pub struct RelationLogits {
    /// `[P, n, n]`
    pub y: Var,
    /// `[n, n]`
    pub h: Var,
    /// Gumbel weights `[P, n, n, K²]` in training mode.
    pub pair_weights: Option<Var>,
}

pub fn reduce_pairs(tape: &mut Tape, y_pairs: Var, h_pairs: Var, mode: ReduceMode<'_>) -> Result<RelationLogits> {
    let h = tape.max_last(h_pairs);
    match mode {
        ReduceMode::Infer => Ok(RelationLogits { y: tape.max_last(y_pairs), h, pair_weights: None }),
        ReduceMode::Train { tau, noise, hard } => {
            let w = tape.gumbel_softmax(y_pairs, tau, noise, hard)?;
            let weighted = tape.mul(w, y_pairs)?;
            Ok(RelationLogits { y: tape.sum_last(weighted), h, pair_weights: Some(w) })
        }
    }
}

/// Linear decay from 10 to 0.5 over the first 30% of iterations.
pub fn annealing_temperature(iter: usize, total_iters: usize) -> Result<f64> {
    if total_iters == 0 {
        return Err(CoreError::Config("total iterations must be positive".into()));
    }
    let end = TAU_ANNEAL_FRACTION * total_iters as f64;
    let t = iter as f64;
    if t >= end {
        return Ok(TAU_END);
    }
    Ok(TAU_START + (TAU_END - TAU_START) * t / end)
}

/// `sqrt(σ(H) σ(Y))` with `H` broadcast over predicates and the diagonal
/// set to zero.
pub fn final_scores(y: &Tensor, h: &Tensor) -> Result<Tensor> {
    let s = y.shape();
    if s.len() != 3 || s[1] != s[2] || h.shape() != [s[1], s[2]] {
        return Err(CoreError::Input(format!("final_scores: shapes {:?} and {:?}", s, h.shape())));
    }
    let n = s[1];
    let plane = n * n;
    Ok(Tensor::from_fn(s.to_vec(), |idx| {
        let cell = idx % plane;
        if cell / n == cell % n {
            0.0
        } else {
            (sigmoid(h.data()[cell]) * sigmoid(y.data()[idx])).sqrt()
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_schedule() {
        assert_eq!(annealing_temperature(0, 1000).unwrap(), 10.0);
        assert_eq!(annealing_temperature(300, 1000).unwrap(), 0.5);
        assert_eq!(annealing_temperature(900, 1000).unwrap(), 0.5);
        assert!((annealing_temperature(150, 1000).unwrap() - 5.25).abs() < 1e-12);
        assert!(annealing_temperature(0, 0).is_err());
    }

    #[test]
    fn score_arithmetic() {
        let p = 0.64f64;
        let y_logit = (0.25f64 / 0.75).ln();
        let h_logit = (p / (1.0 - p)).ln();
        let y = Tensor::new(vec![1, 2, 2], vec![y_logit; 4]).unwrap();
        let h = Tensor::new(vec![2, 2], vec![h_logit; 4]).unwrap();
        let s = final_scores(&y, &h).unwrap();
        assert_eq!(s.data()[0], 0.0);
        assert_eq!(s.data()[3], 0.0);
        assert!((s.data()[1] - 0.4).abs() < 1e-12);
    }
}
