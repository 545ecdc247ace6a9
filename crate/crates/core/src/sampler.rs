//! Point sampling from the multi-scale volume and the reparameterised
//! rep-point offset samplers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use repsgg_tensor::{BoundParams, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Lower clamp for predicted standard deviations.
pub const SIGMA_MIN: f64 = 1e-4;
/// Upper clamp for predicted standard deviations.
pub const SIGMA_MAX: f64 = 1.0;

/// How the third (scale) coordinate is resolved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleInterp {
    /// Linear interpolation between adjacent levels.
    #[default]
    Trilinear,
    /// Snap to the nearest level; no gradient along the scale axis.
    Nearest,
}

/// Normalised `(x, y, z)` coordinates in `[0, 1]³`, last axis of size 3.
#[derive(Clone, Copy, Debug)]
pub struct ReferencePoints(pub Var);

/// Per-entity, per-group offset means and standard deviations `[n, K, 3]`.
#[derive(Clone, Copy, Debug)]
pub struct OffsetDistribution {
    pub mu: Var,
    pub sigma: Var,
}

/// Interpolation corner along one axis: (low index, high index, fraction,
/// whether the raw coordinate lies in `[0, 1]`).
fn axis_corner(coord: f64, size: usize) -> (usize, usize, f64, bool) {
    let inside = (0.0..=1.0).contains(&coord);
    if size == 1 {
        return (0, 0, 0.0, inside);
    }
    let f = coord.clamp(0.0, 1.0) * (size - 1) as f64;
    let lo = (f.floor() as usize).min(size - 2);
    (lo, lo + 1, f - lo as f64, inside)
}

fn nearest_corner(coord: f64, size: usize) -> (usize, usize, f64, bool) {
    let f = coord.clamp(0.0, 1.0) * (size - 1) as f64;
    let i = (f.round() as usize).min(size - 1);
    (i, i, 0.0, false)
}

/// Samples `volume [L, h, w, d]` at `points [n, m, 3]`, returning `[n, m, d]`.
///
/// A coordinate `u ∈ [0, 1]` maps to the continuous index `u · (size − 1)`
/// along width (x), height (y) and level (z). Out-of-range coordinates are
/// clamped to the border and receive no gradient.
pub fn point_sample(tape: &mut Tape, volume: Var, points: Var, interp: ScaleInterp) -> Result<Var> {
    let vs = tape.shape(volume).to_vec();
    let ps = tape.shape(points).to_vec();
    if vs.len() != 4 {
        return Err(CoreError::Input(format!("point_sample: volume must be [L, h, w, d], got {vs:?}")));
    }
    if ps.len() != 3 || ps[2] != 3 {
        return Err(CoreError::Input(format!("point_sample: points must be [n, m, 3], got {ps:?}")));
    }
    let (levels, h, w, d) = (vs[0], vs[1], vs[2], vs[3]);
    let num_points = ps[0] * ps[1];
    let corners = move |p: &[f64]| {
        let cx = axis_corner(p[0], w);
        let cy = axis_corner(p[1], h);
        let cz = match interp {
            ScaleInterp::Trilinear => axis_corner(p[2], levels),
            ScaleInterp::Nearest => nearest_corner(p[2], levels),
        };
        (cx, cy, cz)
    };
    let offset = move |z: usize, y: usize, x: usize| ((z * h + y) * w + x) * d;

    let mut out = vec![0.0; num_points * d];
    {
        let vol = tape.value(volume).data();
        let pts = tape.value(points).data();
        for (pi, p) in pts.chunks(3).enumerate() {
            let ((x0, x1, tx, _), (y0, y1, ty, _), (z0, z1, tz, _)) = corners(p);
            let dst = &mut out[pi * d..(pi + 1) * d];
            for (z, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                for (y, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                    for (x, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                        let wgt = wz * wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let src = &vol[offset(z, y, x)..offset(z, y, x) + d];
                        dst.iter_mut().zip(src).for_each(|(o, s)| *o += wgt * s);
                    }
                }
            }
        }
    }
    let out = Tensor::new(vec![ps[0], ps[1], d], out)?;
    Ok(tape.custom(&[volume, points], out, move |bw| {
        let g = bw.grad_out();
        let vol = bw.value(volume).data();
        let pts = bw.value(points).data();
        bw.accumulate(volume, |gv| {
            for (pi, p) in pts.chunks(3).enumerate() {
                let ((x0, x1, tx, _), (y0, y1, ty, _), (z0, z1, tz, _)) = corners(p);
                let gp = &g[pi * d..(pi + 1) * d];
                for (z, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                    for (y, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                        for (x, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                            let wgt = wz * wy * wx;
                            if wgt == 0.0 {
                                continue;
                            }
                            let o = offset(z, y, x);
                            gv[o..o + d].iter_mut().zip(gp).for_each(|(a, b)| *a += wgt * b);
                        }
                    }
                }
            }
        });
        bw.accumulate(points, |gpts| {
            let dot = |o: usize, gp: &[f64]| -> f64 { vol[o..o + d].iter().zip(gp).map(|(a, b)| a * b).sum() };
            for (pi, p) in pts.chunks(3).enumerate() {
                let ((x0, x1, tx, inx), (y0, y1, ty, iny), (z0, z1, tz, inz)) = corners(p);
                let gp = &g[pi * d..(pi + 1) * d];
                // c[z][y][x] = <V[corner], g>
                let mut c = [[[0.0; 2]; 2]; 2];
                for (a, z) in [z0, z1].into_iter().enumerate() {
                    for (b, y) in [y0, y1].into_iter().enumerate() {
                        for (e, x) in [x0, x1].into_iter().enumerate() {
                            c[a][b][e] = dot(offset(z, y, x), gp);
                        }
                    }
                }
                let wz = [1.0 - tz, tz];
                let wy = [1.0 - ty, ty];
                let wx = [1.0 - tx, tx];
                if inx && w > 1 {
                    let mut s = 0.0;
                    for a in 0..2 {
                        for b in 0..2 {
                            s += wz[a] * wy[b] * (c[a][b][1] - c[a][b][0]);
                        }
                    }
                    gpts[pi * 3] += s * (w - 1) as f64;
                }
                if iny && h > 1 {
                    let mut s = 0.0;
                    for a in 0..2 {
                        for e in 0..2 {
                            s += wz[a] * wx[e] * (c[a][1][e] - c[a][0][e]);
                        }
                    }
                    gpts[pi * 3 + 1] += s * (h - 1) as f64;
                }
                if inz && levels > 1 {
                    let mut s = 0.0;
                    for b in 0..2 {
                        for e in 0..2 {
                            s += wy[b] * wx[e] * (c[1][b][e] - c[0][b][e]);
                        }
                    }
                    gpts[pi * 3 + 2] += s * (levels - 1) as f64;
                }
            }
        });
    }))
}

/// Parameters of one grouped offset sampler: `K` independent two-layer
/// perceptrons `d -> d -> 6` (3 means, 3 log-stds).
#[derive(Clone, Copy, Debug)]
pub struct SamplerParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SamplerParams {
    /// Registers the sampler; the output bias starts at zero mean offset and
    /// standard deviation `init_sigma`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        groups: usize,
        d: usize,
        init_sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        let w1 = store.register(format!("{prefix}.w1"), Tensor::uniform(vec![groups, d, d], bound, rng))?;
        let b1 = store.register(format!("{prefix}.b1"), Tensor::zeros(vec![groups, 1, d]))?;
        let w2 = store.register(format!("{prefix}.w2"), Tensor::uniform(vec![groups, d, 6], 0.1 * bound, rng))?;
        let log_sigma = init_sigma.clamp(SIGMA_MIN, SIGMA_MAX).ln();
        let b2 = store.register(
            format!("{prefix}.b2"),
            Tensor::from_fn(vec![groups, 1, 6], |i| if i % 6 >= 3 { log_sigma } else { 0.0 }),
        )?;
        Ok(SamplerParams { w1, b1, w2, b2 })
    }
}

/// Predicts the offset distribution from `state [n, K, d]` and
/// `box_embed [n, d]`; group `k` only sees slice `k` of the input.
pub fn predict_offsets(
    tape: &mut Tape,
    params: &BoundParams,
    sampler: &SamplerParams,
    state: Var,
    box_embed: Var,
) -> Result<OffsetDistribution> {
    let s = tape.shape(state).to_vec();
    let (n, k, d) = (s[0], s[1], s[2]);
    let be = tape.reshape(box_embed, &[n, 1, d])?;
    let x = tape.add_broadcast(state, be)?;
    let x = tape.permute(x, &[1, 0, 2])?;
    let hdn = tape.bmm(x, params.get(sampler.w1))?;
    let hdn = tape.add_broadcast(hdn, params.get(sampler.b1))?;
    let hdn = tape.relu(hdn);
    let out = tape.bmm(hdn, params.get(sampler.w2))?;
    let out = tape.add_broadcast(out, params.get(sampler.b2))?;
    let out = tape.permute(out, &[1, 0, 2])?;
    debug_assert_eq!(tape.shape(out), &[n, k, 6]);
    let mu = tape.slice_last(out, 0, 3)?;
    let log_sigma = tape.slice_last(out, 3, 3)?;
    let sigma = tape.exp(log_sigma);
    let sigma = tape.clamp(sigma, SIGMA_MIN, SIGMA_MAX);
    Ok(OffsetDistribution { mu, sigma })
}

/// `mu + sigma ⊙ eps` with `eps [n, K, m, 3]` supplied by the caller.
pub fn offsets_from_noise(tape: &mut Tape, dist: &OffsetDistribution, eps: Tensor) -> Result<Var> {
    let s = tape.shape(dist.mu).to_vec();
    let (n, k) = (s[0], s[1]);
    let m = eps.shape()[2];
    eps.check_shape("offsets_from_noise", &[n, k, m, 3])?;
    let full = [n, k, m, 3];
    let mu = tape.reshape(dist.mu, &[n, k, 1, 3])?;
    let mu = tape.broadcast_to(mu, &full)?;
    let sigma = tape.reshape(dist.sigma, &[n, k, 1, 3])?;
    let sigma = tape.broadcast_to(sigma, &full)?;
    let eps = tape.constant(eps);
    let spread = tape.mul(sigma, eps)?;
    Ok(tape.add(mu, spread)?)
}

/// Reparameterised draw `ΔP = μ + σ ⊙ ε`, `ε ~ N(0, I₃)`, shape `[n, K, m, 3]`.
pub fn draw_training_offsets<R: Rng + ?Sized>(
    tape: &mut Tape,
    dist: &OffsetDistribution,
    m: usize,
    rng: &mut R,
) -> Result<Var> {
    if m < 1 {
        return Err(CoreError::Config("draw_training_offsets: m must be >= 1".into()));
    }
    let s = tape.shape(dist.mu).to_vec();
    let eps = Tensor::from_fn(vec![s[0], s[1], m, 3], |_| StandardNormal.sample(rng));
    offsets_from_noise(tape, dist, eps)
}

/// Multipliers `t` of σ along one axis: `-range, -range + step, …` up to `range`.
pub fn lattice_axis(range_mult: usize, step_mult: usize) -> Vec<f64> {
    let count = 2 * range_mult / step_mult + 1;
    (0..count).map(|k| -(range_mult as f64) + (k * step_mult) as f64).collect()
}

/// Cartesian product of [`lattice_axis`] over the three dimensions,
/// first dimension slowest.
pub fn grid_lattice(range_mult: usize, step_mult: usize) -> Result<Vec<[f64; 3]>> {
    if step_mult < 1 {
        return Err(CoreError::Config("inference grid step must be >= 1".into()));
    }
    let axis = lattice_axis(range_mult, step_mult);
    let mut out = Vec::with_capacity(axis.len().pow(3));
    for &a in &axis {
        for &b in &axis {
            for &c in &axis {
                out.push([a, b, c]);
            }
        }
    }
    Ok(out)
}

/// Deterministic offsets `μ + t ⊙ σ` for every lattice point `t`,
/// shape `[n, K, m', 3]` (`m' = 343` at the defaults `3, 1`).
pub fn inference_grid_offsets(
    tape: &mut Tape,
    dist: &OffsetDistribution,
    range_mult: usize,
    step_mult: usize,
) -> Result<Var> {
    let lattice = grid_lattice(range_mult, step_mult)?;
    let s = tape.shape(dist.mu).to_vec();
    let (n, k, m) = (s[0], s[1], lattice.len());
    let eps = Tensor::from_fn(vec![n, k, m, 3], |i| lattice[(i / 3) % m][i % 3]);
    offsets_from_noise(tape, dist, eps)
}

/// `clamp(prev + delta, 0, 1)`, broadcasting `prev` (e.g. `[n, 1, 1, 3]`).
pub fn accumulate_points(tape: &mut Tape, prev: ReferencePoints, delta: Var) -> Result<ReferencePoints> {
    let shape = tape.shape(delta).to_vec();
    let prev = tape.broadcast_to(prev.0, &shape)?;
    let sum = tape.add(prev, delta)?;
    Ok(ReferencePoints(tape.clamp(sum, 0.0, 1.0)))
}
