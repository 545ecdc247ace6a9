//! Training objective: focal BCE with per-predicate focusing, relation-mask
//! focal loss with negative subsampling, margin ranking loss and the
//! rep-point margin loss.

use rand::seq::index::sample;
use rand::Rng;
use repsgg_tensor::{sigmoid, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::decoder::EntityDetection;
use crate::error::{CoreError, Result};

/// A `(subject, predicate, object)` triplet over entity indices.
pub type Triplet = (usize, usize, usize);

/// Dense ground-truth labels for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthRelations {
    num_predicates: usize,
    num_entities: usize,
    triplets: Vec<Triplet>,
    /// `[P, n, n]`
    pub y: Tensor,
    /// `[n, n]`
    pub h: Tensor,
}

impl GroundTruthRelations {
    /// Builds labels from `(s, p, o)` triplets; duplicates collapse.
    pub fn new(num_predicates: usize, num_entities: usize, triplets: &[Triplet]) -> Result<Self> {
        let n = num_entities;
        let mut y = vec![0.0; num_predicates * n * n];
        let mut h = vec![0.0; n * n];
        let mut kept = Vec::with_capacity(triplets.len());
        for &(s, p, o) in triplets {
            if s >= n || o >= n || p >= num_predicates {
                return Err(CoreError::Input(format!("triplet ({s}, {p}, {o}) out of range")));
            }
            if s == o {
                return Err(CoreError::Input(format!("self-relation ({s}, {p}, {o})")));
            }
            let idx = (p * n + s) * n + o;
            if y[idx] == 0.0 {
                y[idx] = 1.0;
                kept.push((s, p, o));
            }
            h[s * n + o] = 1.0;
        }
        let shape_y = vec![num_predicates, n.max(1), n.max(1)];
        let y = if n == 0 { Tensor::zeros(vec![num_predicates, 1, 1]) } else { Tensor::new(shape_y, y)? };
        let h = if n == 0 { Tensor::zeros(vec![1, 1]) } else { Tensor::new(vec![n, n], h)? };
        Ok(GroundTruthRelations { num_predicates, num_entities, triplets: kept, y, h })
    }

    pub fn num_predicates(&self) -> usize {
        self.num_predicates
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn n_pos(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_positive(&self, p: usize, s: usize, o: usize) -> bool {
        let n = self.num_entities;
        self.y.data()[(p * n + s) * n + o] == 1.0
    }

    pub fn pair_has_positive(&self, s: usize, o: usize) -> bool {
        self.h.data()[s * self.num_entities + o] == 1.0
    }

    /// Positive predicates of pair `(s, o)` in ascending order.
    pub fn positives_of_pair(&self, s: usize, o: usize) -> Vec<usize> {
        (0..self.num_predicates).filter(|&p| self.is_positive(p, s, o)).collect()
    }

    /// Ground-truth count per predicate.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_predicates];
        for &(_, p, _) in &self.triplets {
            c[p] += 1;
        }
        c
    }
}

/// Weights of the loss terms in the total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub focal: f64,
    pub mask: f64,
    pub margin_rank: f64,
    pub rep_point: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { focal: 1.0, mask: 1.0, margin_rank: 1.0, rep_point: 1.0 }
    }
}

/// Values of each loss term for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal_predicate: f64,
    pub mask: f64,
    pub margin_rank: f64,
    pub rep_point_margin: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("focal_predicate", self.focal_predicate),
            ("mask", self.mask),
            ("margin_rank", self.margin_rank),
            ("rep_point_margin", self.rep_point_margin),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `γ_p = base · (π_p − min π) / (max π − min π)`, all zero for uniform priors.
pub fn predicate_gammas(pi: &[f64], gamma_base: f64) -> Vec<f64> {
    let lo = pi.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; pi.len()];
    }
    pi.iter().map(|&p| gamma_base * (p - lo) / (hi - lo)).collect()
}

/// `log σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// One supervised logit of a focal loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalEntry {
    pub index: usize,
    pub positive: bool,
    pub gamma: f64,
}

/// Value and derivative w.r.t. the logit of a single focal term.
pub fn focal_term(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let s = sigmoid(x);
    if positive {
        let log_s = log_sigmoid(x);
        let q = 1.0 - s;
        let w = q.powf(gamma);
        (-alpha * w * log_s, alpha * w * (gamma * s * log_s - q))
    } else {
        let log_q = log_sigmoid(-x);
        let w = s.powf(gamma);
        (-(1.0 - alpha) * w * log_q, (1.0 - alpha) * w * (s - gamma * (1.0 - s) * log_q))
    }
}

/// `Σ focal(entries) / norm` as a differentiable scalar.
pub fn focal_sum(tape: &mut Tape, logits: Var, entries: Vec<FocalEntry>, alpha: f64, norm: f64) -> Result<Var> {
    let x = tape.value(logits).data();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(entries.len());
    for e in &entries {
        let (v, g) = focal_term(x[e.index], e.positive, alpha, e.gamma);
        total += v;
        grads.push(g / norm);
    }
    let value = Tensor::scalar(total / norm);
    Ok(tape.custom(&[logits], value, move |bw| {
        let g = bw.grad_out()[0];
        bw.accumulate(logits, |gx| {
            for (e, d) in entries.iter().zip(&grads) {
                gx[e.index] += g * d;
            }
        });
    }))
}

/// Focal BCE over all off-diagonal entries of `Yhat [P, n, n]`, normalised
/// by the number of positives. `None` when the scene has no positives.
pub fn focal_bce(
    tape: &mut Tape,
    logits: Var,
    gt: &GroundTruthRelations,
    alpha: f64,
    gammas: &[f64],
) -> Result<Option<Var>> {
    let (p_count, n) = (gt.num_predicates, gt.num_entities);
    if gt.n_pos() == 0 {
        return Ok(None);
    }
    if tape.shape(logits) != [p_count, n, n] || gammas.len() != p_count {
        return Err(CoreError::Input("focal_bce: shape mismatch".into()));
    }
    let mut entries = Vec::with_capacity(p_count * n * (n - 1));
    for p in 0..p_count {
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let index = (p * n + i) * n + j;
                entries.push(FocalEntry { index, positive: gt.y.data()[index] == 1.0, gamma: gammas[p] });
            }
        }
    }
    focal_sum(tape, logits, entries, alpha, gt.n_pos() as f64).map(Some)
}

/// Focal loss on the relation mask `Hhat [n, n]` over all positive pairs and
/// at most `neg_ratio` negatives per positive pair, drawn without
/// replacement. `None` when no pair is positive.
pub fn mask_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    logits: Var,
    gt: &GroundTruthRelations,
    alpha: f64,
    gamma: f64,
    neg_ratio: usize,
    rng: &mut R,
) -> Result<Option<Var>> {
    let n = gt.num_entities;
    if tape.shape(logits) != [n, n] {
        return Err(CoreError::Input("mask_loss: shape mismatch".into()));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if gt.pair_has_positive(i, j) {
                pos.push(i * n + j);
            } else {
                neg.push(i * n + j);
            }
        }
    }
    if pos.is_empty() {
        return Ok(None);
    }
    let budget = neg_ratio.saturating_mul(pos.len());
    let negatives: Vec<usize> = if neg.len() > budget {
        let mut picked: Vec<usize> = sample(rng, neg.len(), budget).into_iter().map(|k| neg[k]).collect();
        picked.sort_unstable();
        picked
    } else {
        neg
    };
    let mut entries: Vec<FocalEntry> = pos.iter().map(|&index| FocalEntry { index, positive: true, gamma }).collect();
    entries.extend(negatives.into_iter().map(|index| FocalEntry { index, positive: false, gamma }));
    let norm = pos.len() as f64;
    focal_sum(tape, logits, entries, alpha, norm).map(Some)
}

/// Margin ranking loss: for every predicate `p` with positives, negatives
/// of `p` scoring above the weakest positive `η_p` are penalised by the
/// gap. Averaged over all such negative entries; `None` when there are none.
pub fn margin_ranking_loss(tape: &mut Tape, logits: Var, gt: &GroundTruthRelations) -> Result<Option<Var>> {
    let (p_count, n) = (gt.num_predicates, gt.num_entities);
    if tape.shape(logits) != [p_count, n, n] {
        return Err(CoreError::Input("margin_ranking_loss: shape mismatch".into()));
    }
    let x = tape.value(logits).data();
    // (negative index, argmin positive index)
    let mut active: Vec<(usize, usize)> = Vec::new();
    let mut total = 0.0;
    let mut negatives = 0usize;
    for p in 0..p_count {
        let mut eta = f64::INFINITY;
        let mut eta_idx = usize::MAX;
        let mut negs = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let idx = (p * n + i) * n + j;
                if gt.y.data()[idx] == 1.0 {
                    let s = sigmoid(x[idx]);
                    if s < eta {
                        eta = s;
                        eta_idx = idx;
                    }
                } else {
                    negs.push(idx);
                }
            }
        }
        if eta_idx == usize::MAX {
            continue;
        }
        negatives += negs.len();
        for idx in negs {
            let gap = sigmoid(x[idx]) - eta;
            if gap > 0.0 {
                total += gap;
                active.push((idx, eta_idx));
            }
        }
    }
    if negatives == 0 {
        return Ok(None);
    }
    let norm = negatives as f64;
    let value = Tensor::scalar(total / norm);
    Ok(Some(tape.custom(&[logits], value, move |bw| {
        let g = bw.grad_out()[0] / norm;
        let x = bw.value(logits).data();
        bw.accumulate(logits, |gx| {
            for &(neg, pos) in &active {
                let sn = sigmoid(x[neg]);
                let sp = sigmoid(x[pos]);
                gx[neg] += g * sn * (1.0 - sn);
                gx[pos] -= g * sp * (1.0 - sp);
            }
        });
    })))
}

/// Bounding box of the union boxes of every triplet involving each entity;
/// `None` for entities in no triplet.
pub fn enclosing_boxes(detections: &[EntityDetection], triplets: &[Triplet]) -> Vec<Option<[f64; 4]>> {
    let mut out: Vec<Option<[f64; 4]>> = vec![None; detections.len()];
    for &(s, _, o) in triplets {
        let (a, b) = (detections[s].bbox, detections[o].bbox);
        let union = [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])];
        for e in [s, o] {
            out[e] = Some(match out[e] {
                None => union,
                Some(c) => [c[0].min(union[0]), c[1].min(union[1]), c[2].max(union[2]), c[3].max(union[3])],
            });
        }
    }
    out
}

/// Mean hinge distance of `(x, y)` of `points [n, K, 3]` outside each
/// entity's box, over entities that have a box. The scale coordinate is
/// free. `None` if no entity has a box.
pub fn box_hinge(tape: &mut Tape, points: Var, boxes: &[Option<[f64; 4]>]) -> Result<Option<Var>> {
    let s = tape.shape(points).to_vec();
    if s.len() != 3 || s[2] != 3 || s[0] != boxes.len() {
        return Err(CoreError::Input(format!("box_hinge: points shape {s:?} for {} boxes", boxes.len())));
    }
    let groups = s[1];
    let counted = boxes.iter().filter(|b| b.is_some()).count() * groups;
    if counted == 0 {
        return Ok(None);
    }
    let x = tape.value(points).data();
    let mut total = 0.0;
    let mut grads = vec![0.0; x.len()];
    for (e, bx) in boxes.iter().enumerate() {
        let Some(bx) = bx else { continue };
        for k in 0..groups {
            let base = (e * groups + k) * 3;
            for axis in 0..2 {
                let v = x[base + axis];
                let (lo, hi) = (bx[axis], bx[axis + 2]);
                if v < lo {
                    total += lo - v;
                    grads[base + axis] = -1.0;
                } else if v > hi {
                    total += v - hi;
                    grads[base + axis] = 1.0;
                }
            }
        }
    }
    let norm = counted as f64;
    let value = Tensor::scalar(total / norm);
    Ok(Some(tape.custom(&[points], value, move |bw| {
        let g = bw.grad_out()[0] / norm;
        bw.accumulate(points, |gx| {
            gx.iter_mut().zip(&grads).for_each(|(a, d)| *a += g * d);
        });
    })))
}

/// Rep-point margin loss for one sampler: the mean rep-point of layer `l`
/// is the reference point plus the accumulated means `μ¹ + … + μˡ`; the
/// box hinge is summed over layers.
pub fn rep_point_margin_loss(
    tape: &mut Tape,
    reference: &Tensor,
    mu_per_layer: &[Var],
    boxes: &[Option<[f64; 4]>],
) -> Result<Option<Var>> {
    if mu_per_layer.is_empty() || boxes.iter().all(|b| b.is_none()) {
        return Ok(None);
    }
    let shape = tape.shape(mu_per_layer[0]).to_vec();
    let r = tape.constant(reference.clone());
    let mut mean = tape.broadcast_to(r, &shape)?;
    let mut total: Option<Var> = None;
    for &mu in mu_per_layer {
        mean = tape.add(mean, mu)?;
        if let Some(term) = box_hinge(tape, mean, boxes)? {
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
    }
    Ok(total)
}
