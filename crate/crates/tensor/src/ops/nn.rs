use rand::RngCore;

use super::split_axis;
use crate::error::{shape_err, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Source of Gumbel perturbations for [`Tape::gumbel_softmax`].
pub enum GumbelNoise<'a> {
    Sampled(&'a mut dyn RngCore),
    /// Forces `g = 0`, reducing the op to `softmax(logits / tau)`.
    Zero,
}

/// Standard Gumbel samples via the inverse CDF `-ln(-ln u)`, `u ∈ (0, 1)`.
pub fn gumbel_noise(shape: &[usize], rng: &mut dyn RngCore) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let u = loop {
            // 53 random mantissa bits, rejecting the closed endpoint 0.
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 {
                break u;
            }
        };
        -(-u.ln()).ln()
    })
}

/// In-place stable softmax over a strided lane.
fn softmax_lane(src: &[f64], dst: &mut [f64], base: usize, len: usize, stride: usize) {
    let mut max = f64::NEG_INFINITY;
    for t in 0..len {
        max = max.max(src[base + t * stride]);
    }
    let mut sum = 0.0;
    for t in 0..len {
        let e = (src[base + t * stride] - max).exp();
        dst[base + t * stride] = e;
        sum += e;
    }
    for t in 0..len {
        dst[base + t * stride] /= sum;
    }
}

fn softmax_backward_lane(y: &[f64], g: &[f64], gx: &mut [f64], base: usize, len: usize, stride: usize, scale: f64) {
    let mut dot = 0.0;
    for t in 0..len {
        let i = base + t * stride;
        dot += g[i] * y[i];
    }
    for t in 0..len {
        let i = base + t * stride;
        gx[i] += scale * y[i] * (g[i] - dot);
    }
}

impl Tape {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(shape_err("softmax", format!("axis < rank (axis {axis})"), x.shape()));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                softmax_lane(x.data(), &mut out, o * len * inner + i, len, inner);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.custom(&[a], out, move |bw| {
            let g = bw.grad_out();
            let y = bw.output().data();
            bw.accumulate(a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        softmax_backward_lane(y, g, ga, o * len * inner + i, len, inner, 1.0);
                    }
                }
            });
        }))
    }

    /// Normalises each last-axis row to zero mean and unit variance, then
    /// applies `gain` and `shift`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().unwrap();
        if self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(shape_err("layer_norm", format!("gain/shift [{d}]"), self.shape(gain)));
        }
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                xhat[r * d + c] = (row[c] - mean) * is;
            }
        }
        let gv = self.value(gain).data();
        let sv = self.value(shift).data();
        let out = Tensor::from_fn(x.shape().to_vec(), |i| xhat[i] * gv[i % d] + sv[i % d]);
        Ok(self.custom(&[a, gain, shift], out, move |bw| {
            let g = bw.grad_out();
            let gv = bw.value(gain).data();
            bw.accumulate(a, |ga| {
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..d {
                        dxhat[c] = g[r * d + c] * gv[c];
                        sum_d += dxhat[c];
                        sum_dx += dxhat[c] * xhat[r * d + c];
                    }
                    let k = inv_std[r] / d as f64;
                    for c in 0..d {
                        ga[r * d + c] += k * (d as f64 * dxhat[c] - sum_d - xhat[r * d + c] * sum_dx);
                    }
                }
            });
            bw.accumulate(gain, |gg| {
                for (i, gi) in g.iter().enumerate() {
                    gg[i % d] += gi * xhat[i];
                }
            });
            bw.accumulate(shift, |gs| {
                for (i, gi) in g.iter().enumerate() {
                    gs[i % d] += gi;
                }
            });
        }))
    }

    /// Gumbel-Softmax over the last axis: `softmax((logits + g) / tau)`.
    ///
    /// With `hard`, the forward value is the one-hot argmax of the perturbed
    /// logits while the gradient is that of the soft sample (straight-through).
    pub fn gumbel_softmax(&mut self, logits: Var, tau: f64, noise: GumbelNoise<'_>, hard: bool) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(TensorError::Param(format!("gumbel_softmax: tau must be > 0, got {tau}")));
        }
        let x = self.value(logits);
        let shape = x.shape().to_vec();
        let len = *shape.last().unwrap();
        let g = match noise {
            GumbelNoise::Sampled(rng) => gumbel_noise(&shape, rng),
            GumbelNoise::Zero => Tensor::zeros(shape.clone()),
        };
        let perturbed: Vec<f64> = x.data().iter().zip(g.data()).map(|(l, g)| (l + g) / tau).collect();
        let mut soft = vec![0.0; perturbed.len()];
        for r in 0..perturbed.len() / len {
            softmax_lane(&perturbed, &mut soft, r * len, len, 1);
        }
        let value = if hard {
            let mut one_hot = vec![0.0; soft.len()];
            for (r, row) in perturbed.chunks(len).enumerate() {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0;
                one_hot[r * len + best] = 1.0;
            }
            one_hot
        } else {
            soft.clone()
        };
        let out = Tensor::new(shape, value)?;
        Ok(self.custom(&[logits], out, move |bw| {
            let g = bw.grad_out();
            bw.accumulate(logits, |ga| {
                for r in 0..soft.len() / len {
                    softmax_backward_lane(&soft, g, ga, r * len, len, 1, 1.0 / tau);
                }
            });
        }))
    }
}
