//! Multi-scale feature volumes and positional embeddings.
//!
//! Visual features are synthesised from entity boxes instead of being
//! produced by a backbone: each entity stamps a Gaussian blob of its class
//! signature onto its scale level.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use repsgg_tensor::{Tape, Tensor, Var};

use crate::decoder::EntityDetection;
use crate::error::{CoreError, Result};

/// Number of stacked pyramid levels.
pub const NUM_LEVELS: usize = 5;

/// Stride between image pixels and feature cells.
pub const FEATURE_STRIDE: usize = 8;

/// Visual features `V` and positional embeddings `PE`, both `[5, H, W, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub v: Tensor,
    pub pe: Tensor,
}

impl FeatureVolume {
    pub fn new(v: Tensor, pe: Tensor) -> Result<Self> {
        if v.shape() != pe.shape() || v.rank() != 4 || v.shape()[0] != NUM_LEVELS {
            return Err(CoreError::Input(format!(
                "feature volume shapes must match and be [5, H, W, d]; got {:?} and {:?}",
                v.shape(),
                pe.shape()
            )));
        }
        Ok(FeatureVolume { v, pe })
    }

    pub fn height(&self) -> usize {
        self.v.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.v.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.v.shape()[3]
    }
}

/// Feature grid size for an image of `(h0, w0)` pixels.
pub fn grid_size(image_h: usize, image_w: usize) -> (usize, usize) {
    ((image_h / FEATURE_STRIDE).max(1), (image_w / FEATURE_STRIDE).max(1))
}

/// Level-independent sinusoidal 2D embedding `[H, W, d]`.
///
/// The first `d/2` channels encode the column index and the last `d/2` the
/// row index, each as interleaved `(sin, cos)` pairs with wavelengths
/// growing geometrically up to base 10000.
pub fn sinusoidal_2d(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(CoreError::Config(format!("positional embedding width {d} must be a positive multiple of 4")));
    }
    let half = d / 2;
    let pairs = half / 2;
    let freqs: Vec<f64> = (0..pairs).map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64)).collect();
    let mut out = Tensor::zeros(vec![h, w, d]);
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * d;
            for (i, f) in freqs.iter().enumerate() {
                let ax = x as f64 * f;
                let ay = y as f64 * f;
                data[base + 2 * i] = ax.sin();
                data[base + 2 * i + 1] = ax.cos();
                data[base + half + 2 * i] = ay.sin();
                data[base + half + 2 * i + 1] = ay.cos();
            }
        }
    }
    Ok(out)
}

/// `PE[l, y, x, :] = sinusoid(y, x) + scale_embeds[l]`.
pub fn build_positional_embeddings(h: usize, w: usize, d: usize, scale_embeds: &Tensor) -> Result<Tensor> {
    scale_embeds.check_shape("build_positional_embeddings", &[NUM_LEVELS, d])?;
    let base = sinusoidal_2d(h, w, d)?;
    let plane = h * w * d;
    Ok(Tensor::from_fn(vec![NUM_LEVELS, h, w, d], |i| {
        let level = i / plane;
        base.data()[i % plane] + scale_embeds.data()[level * d + i % d]
    }))
}

/// Differentiable form of [`build_positional_embeddings`] w.r.t. the scale
/// embeddings `[5, d]`.
pub fn positional_embeddings_on_tape(tape: &mut Tape, base: &Tensor, scale_embeds: Var) -> Result<Var> {
    let (h, w, d) = (base.shape()[0], base.shape()[1], base.shape()[2]);
    let full = [NUM_LEVELS, h, w, d];
    let base = tape.constant(base.reshape(vec![1, h, w, d])?);
    let base = tape.broadcast_to(base, &full)?;
    let scale = tape.reshape(scale_embeds, &[NUM_LEVELS, 1, 1, d])?;
    Ok(tape.add_broadcast(base, scale)?)
}

/// Memoises [`sinusoidal_2d`] per `(H, W, d)`.
#[derive(Debug, Default)]
pub struct PositionalCache {
    entries: HashMap<(usize, usize, usize), Tensor>,
}

impl PositionalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, h: usize, w: usize, d: usize) -> Result<&Tensor> {
        if !self.entries.contains_key(&(h, w, d)) {
            let t = sinusoidal_2d(h, w, d)?;
            self.entries.insert((h, w, d), t);
        }
        Ok(&self.entries[&(h, w, d)])
    }
}

/// Blob radius as a fraction of the box diagonal.
pub const BLOB_EXTENT: f64 = 0.25;

/// Synthesises `V [5, H, W, d]` for a scene of `image_size = (h0, w0)` pixels.
///
/// Each entity adds `exp(-r² / 2s²) · signature[class]` on its own level,
/// with `r` the normalised distance to the box centre and
/// `s = 0.25 × box diagonal`; then i.i.d. `N(0, noise_std²)` noise is added.
pub fn synthesize_features<R: Rng + ?Sized>(
    entities: &[EntityDetection],
    image_size: (usize, usize),
    class_signatures: &Tensor,
    noise_std: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let (h, w) = grid_size(image_size.0, image_size.1);
    let d = class_signatures.shape()[1];
    let num_classes = class_signatures.shape()[0];
    let mut v = Tensor::zeros(vec![NUM_LEVELS, h, w, d]);
    let data = v.data_mut();
    let norm = |i: usize, size: usize| if size > 1 { i as f64 / (size - 1) as f64 } else { 0.0 };
    for e in entities {
        if e.class_label >= num_classes || e.scale_level >= NUM_LEVELS {
            return Err(CoreError::Input(format!("entity {e:?} out of range")));
        }
        let (cx, cy) = e.center();
        let s = BLOB_EXTENT * e.diagonal();
        let inv = 1.0 / (2.0 * s * s);
        let sig = &class_signatures.data()[e.class_label * d..(e.class_label + 1) * d];
        for y in 0..h {
            let dy = norm(y, h) - cy;
            for x in 0..w {
                let dx = norm(x, w) - cx;
                let weight = (-(dx * dx + dy * dy) * inv).exp();
                if weight < 1e-12 {
                    continue;
                }
                let base = ((e.scale_level * h + y) * w + x) * d;
                for c in 0..d {
                    data[base + c] += weight * sig[c];
                }
            }
        }
    }
    if noise_std > 0.0 {
        for val in data.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *val += noise_std * z;
        }
    }
    Ok(v)
}
