//! Ranked triplet matching and recall metrics for predicate classification.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

use repsgg_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::losses::Triplet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedTriplet {
    pub predicate: usize,
    pub subject: usize,
    pub object: usize,
    pub score: f64,
}

impl RankedTriplet {
    pub fn key(&self) -> Triplet {
        (self.subject, self.predicate, self.object)
    }
}

/// Score descending, then predicate, subject, object ascending.
pub fn ranking_order(a: &RankedTriplet, b: &RankedTriplet) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.predicate.cmp(&b.predicate))
        .then(a.subject.cmp(&b.subject))
        .then(a.object.cmp(&b.object))
}

fn check_scores(scores: &Tensor) -> Result<(usize, usize)> {
    let s = scores.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(CoreError::Input(format!("scores must be [P, n, n], got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Every off-diagonal `(p, i, j)` in ranking order.
pub fn rank_triplets(scores: &Tensor) -> Result<Vec<RankedTriplet>> {
    let (p_count, n) = check_scores(scores)?;
    let mut out = Vec::with_capacity(p_count * n * n.saturating_sub(1));
    for p in 0..p_count {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let score = scores.data()[(p * n + i) * n + j];
                    out.push(RankedTriplet { predicate: p, subject: i, object: j, score });
                }
            }
        }
    }
    out.sort_by(ranking_order);
    Ok(out)
}

/// Ranking with a graph constraint: only the best predicate of each pair
/// (lowest index on ties) is kept.
pub fn rank_triplets_constrained(scores: &Tensor) -> Result<Vec<RankedTriplet>> {
    let mut seen = HashSet::new();
    Ok(rank_triplets(scores)?.into_iter().filter(|t| seen.insert((t.subject, t.object))).collect())
}

fn top_k_set(ranked: &[RankedTriplet], k: usize) -> HashSet<Triplet> {
    ranked.iter().take(k).map(RankedTriplet::key).collect()
}

/// `|top-K ∩ GT| / |GT|`; `None` for a scene without ground truth.
pub fn recall_at_k(ranked: &[RankedTriplet], gt: &[Triplet], k: usize) -> Option<f64> {
    let gt: BTreeSet<Triplet> = gt.iter().copied().collect();
    if gt.is_empty() {
        return None;
    }
    let top = top_k_set(ranked, k);
    Some(gt.iter().filter(|t| top.contains(t)).count() as f64 / gt.len() as f64)
}

/// Per-predicate recall within one scene; `None` where the scene has no GT
/// of that predicate.
pub fn predicate_recall_at_k(
    ranked: &[RankedTriplet],
    gt: &[Triplet],
    k: usize,
    num_predicates: usize,
) -> Vec<Option<f64>> {
    let gt: BTreeSet<Triplet> = gt.iter().copied().collect();
    let top = top_k_set(ranked, k);
    let mut hits = vec![0usize; num_predicates];
    let mut totals = vec![0usize; num_predicates];
    for t in &gt {
        totals[t.1] += 1;
        if top.contains(t) {
            hits[t.1] += 1;
        }
    }
    hits.iter().zip(&totals).map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64)).collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Mean of per-scene recall over scenes with ground truth.
pub fn mean_scene_recall_at_k(scenes: &[(Vec<RankedTriplet>, Vec<Triplet>)], k: usize) -> Option<f64> {
    mean(scenes.iter().filter_map(|(r, g)| recall_at_k(r, g, k)))
}

/// Recall of each predicate averaged over the scenes containing it.
pub fn per_predicate_recall_at_k(
    scenes: &[(Vec<RankedTriplet>, Vec<Triplet>)],
    k: usize,
    num_predicates: usize,
) -> Vec<Option<f64>> {
    let per_scene: Vec<Vec<Option<f64>>> =
        scenes.iter().map(|(r, g)| predicate_recall_at_k(r, g, k, num_predicates)).collect();
    (0..num_predicates).map(|p| mean(per_scene.iter().filter_map(|v| v[p]))).collect()
}

/// Per-predicate recalls averaged over predicates with ground truth.
pub fn mean_recall_at_k(scenes: &[(Vec<RankedTriplet>, Vec<Triplet>)], k: usize, num_predicates: usize) -> Option<f64> {
    mean(per_predicate_recall_at_k(scenes, k, num_predicates).into_iter().flatten())
}

/// `(subject class, predicate, object class)` combinations seen in training.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroShotRegistry {
    pub seen: BTreeSet<(usize, usize, usize)>,
}

impl ZeroShotRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, subject_class: usize, predicate: usize, object_class: usize) {
        self.seen.insert((subject_class, predicate, object_class));
    }

    pub fn contains(&self, subject_class: usize, predicate: usize, object_class: usize) -> bool {
        self.seen.contains(&(subject_class, predicate, object_class))
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// Ground-truth triplets whose class combination is absent from `registry`.
pub fn zero_shot_filter(gt: &[Triplet], registry: &ZeroShotRegistry, classes: &[usize]) -> Vec<Triplet> {
    gt.iter().copied().filter(|&(s, p, o)| !registry.contains(classes[s], p, classes[o])).collect()
}
