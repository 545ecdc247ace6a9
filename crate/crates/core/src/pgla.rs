//! Performance-guided logit adjustment: per-predicate weights and biases
//! driven by a running recall (or precision) estimate, confusion logits,
//! and the per-instance adjustment applied inside the loss.

use serde::{Deserialize, Serialize};

use repsgg_tensor::{Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::eval::rank_triplets;
use crate::losses::GroundTruthRelations;

/// Default base of the per-predicate momentum `ρ = base^(−log π)`.
pub const DEFAULT_EMA_BASE: f64 = 0.9999;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PglaMetric {
    #[default]
    Recall,
    Precision,
}

/// Running statistics of the adjustment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PglaState {
    pub r: Vec<f64>,
    /// Row-major `[P, P]`; row = ground-truth predicate.
    pub d: Vec<f64>,
    pub pi: Vec<f64>,
    pub lambda: f64,
    pub rho: Vec<f64>,
    pub metric: PglaMetric,
    pub iter: usize,
}

/// Weights `W` and biases `B` per predicate.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBias {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl PglaState {
    pub fn new(pi: Vec<f64>, lambda: f64, metric: PglaMetric, ema_base: f64) -> Result<Self> {
        let p = pi.len();
        if p == 0 || pi.iter().any(|&x| !(x > 0.0)) {
            return Err(CoreError::Config("priors must be positive".into()));
        }
        if (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config("priors must sum to 1".into()));
        }
        if !(lambda > 0.0) {
            return Err(CoreError::Config("lambda must be positive".into()));
        }
        if !(ema_base > 0.0 && ema_base < 1.0) {
            return Err(CoreError::Config("EMA base must lie in (0, 1)".into()));
        }
        let rho = pi.iter().map(|&x| ema_base.powf(-x.ln())).collect();
        Ok(PglaState { r: vec![0.0; p], d: vec![0.0; p * p], pi, lambda, rho, metric, iter: 0 })
    }

    pub fn num_predicates(&self) -> usize {
        self.pi.len()
    }

    /// `Δr = r − mean(r)`, `W = 1 − tanh(Δr)`, `B = −tanh(Δr/λ)·log(1/P) + log π`.
    pub fn compute_wb(&self) -> WeightBias {
        let p = self.num_predicates() as f64;
        // Shifted by r[0] so that a uniform r gives Δr = 0 exactly.
        let r0 = self.r[0];
        let mean = r0 + self.r.iter().map(|r| r - r0).sum::<f64>() / p;
        let log_inv_p = (1.0 / p).ln();
        let (w, b) = self
            .r
            .iter()
            .zip(&self.pi)
            .map(|(&r, &pi)| {
                let dr = r - mean;
                (1.0 - dr.tanh(), -(dr / self.lambda).tanh() * log_inv_p + pi.ln())
            })
            .unzip();
        WeightBias { w, b }
    }

    /// Largest entry of each row of `D`.
    pub fn d_row_max(&self) -> Vec<f64> {
        let p = self.num_predicates();
        self.d.chunks(p).map(|row| row.iter().copied().fold(0.0, f64::max)).collect()
    }

    fn ema(&mut self, p: usize, batch: f64) {
        self.r[p] = (1.0 - self.rho[p]) * batch + self.rho[p] * self.r[p];
    }

    /// Applies the EMA with per-image statistics averaged over the images in
    /// which each predicate has a value.
    pub fn apply_metric_batch(&mut self, per_image: &[Vec<Option<f64>>]) {
        for p in 0..self.num_predicates() {
            let vals: Vec<f64> = per_image.iter().filter_map(|v| v[p]).collect();
            if !vals.is_empty() {
                self.ema(p, vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
    }

    /// Recall or precision update from `(scores, gt)` pairs of one batch.
    pub fn update_metric(&mut self, batch: &[(&Tensor, &GroundTruthRelations)]) -> Result<()> {
        let stats = batch
            .iter()
            .map(|(s, g)| match self.metric {
                PglaMetric::Recall => batch_recall(&self.pi, s, g),
                PglaMetric::Precision => batch_precision(&self.pi, s, g),
            })
            .collect::<Result<Vec<_>>>()?;
        self.apply_metric_batch(&stats);
        Ok(())
    }

    /// Confusion update from raw logits; instances are pooled over the batch.
    pub fn update_confusion(&mut self, batch: &[(&Tensor, &GroundTruthRelations)]) -> Result<()> {
        let p_count = self.num_predicates();
        let mut sums = vec![0.0; p_count * p_count];
        let mut counts = vec![0usize; p_count];
        for (logits, gt) in batch {
            let (rows, c) = confusion_sums(&self.pi, logits, gt)?;
            sums.iter_mut().zip(&rows).for_each(|(a, b)| *a += b);
            counts.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
        }
        for p in 0..p_count {
            if counts[p] == 0 {
                continue;
            }
            let rho = self.rho[p];
            for q in 0..p_count {
                let batch_val = sums[p * p_count + q] / counts[p] as f64;
                let cell = &mut self.d[p * p_count + q];
                *cell = (1.0 - rho) * batch_val + rho * *cell;
            }
        }
        Ok(())
    }
}

/// `ν`: predicates sorted by ascending prior (stable), and `κ^p` for each.
pub fn kappa(pi: &[f64], counts: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pi.len()).collect();
    order.sort_by(|&a, &b| pi[a].partial_cmp(&pi[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut kappa = vec![0; pi.len()];
    let mut acc = 0;
    for p in order {
        acc += counts[p];
        kappa[p] = acc;
    }
    kappa
}

fn check(pi: &[f64], scores: &Tensor, gt: &GroundTruthRelations) -> Result<()> {
    let n = gt.num_entities();
    if scores.shape() != [pi.len(), n, n] || gt.num_predicates() != pi.len() {
        return Err(CoreError::Input(format!("PGLA statistics: score shape {:?}", scores.shape())));
    }
    Ok(())
}

/// Per-predicate `(matches of p in top-κ^p, predictions of p in top-κ^p)`.
fn top_kappa_counts(pi: &[f64], scores: &Tensor, gt: &GroundTruthRelations) -> Result<Vec<(usize, usize)>> {
    check(pi, scores, gt)?;
    let counts = gt.counts();
    let kappa = kappa(pi, &counts);
    let ranked = rank_triplets(scores)?;
    Ok((0..pi.len())
        .map(|p| {
            if counts[p] == 0 {
                return (0, 0);
            }
            let top = ranked.iter().take(kappa[p]).filter(|t| t.predicate == p);
            top.fold((0, 0), |(hit, all), t| (hit + gt.is_positive(p, t.subject, t.object) as usize, all + 1))
        })
        .collect())
}

/// Pre-EMA recall of one image; `None` for predicates absent from it.
pub fn batch_recall(pi: &[f64], scores: &Tensor, gt: &GroundTruthRelations) -> Result<Vec<Option<f64>>> {
    let counts = gt.counts();
    Ok(top_kappa_counts(pi, scores, gt)?
        .into_iter()
        .zip(counts)
        .map(|((hit, _), n)| (n > 0).then(|| hit as f64 / n as f64))
        .collect())
}

/// Pre-EMA precision of one image; `None` where `p` has no GT or never
/// appears within its top-κ.
pub fn batch_precision(pi: &[f64], scores: &Tensor, gt: &GroundTruthRelations) -> Result<Vec<Option<f64>>> {
    Ok(top_kappa_counts(pi, scores, gt)?
        .into_iter()
        .map(|(hit, all)| (all > 0).then(|| hit as f64 / all as f64))
        .collect())
}

/// Unnormalised confusion rows and instance counts of one image.
pub fn confusion_sums(pi: &[f64], logits: &Tensor, gt: &GroundTruthRelations) -> Result<(Vec<f64>, Vec<usize>)> {
    check(pi, logits, gt)?;
    let p_count = pi.len();
    let n = gt.num_entities();
    let mut sums = vec![0.0; p_count * p_count];
    let mut counts = vec![0usize; p_count];
    let y = logits.data();
    for &(s, p, o) in gt.triplets() {
        counts[p] += 1;
        let own = y[(p * n + s) * n + o];
        for q in 0..p_count {
            let gate = (pi[q].ln() - pi[p].ln()).max(0.0).tanh();
            if gate == 0.0 {
                continue;
            }
            let gap = (y[(q * n + s) * n + o] - own).max(0.0);
            sums[p * p_count + q] += gap * gate;
        }
    }
    Ok((sums, counts))
}

/// Per-instance adjustment of `Yhat [P, n, n]`: on pairs with a positive
/// predicate, `W ⊙ ŷ + B + max over positives p of D[p, :]`; other pairs
/// pass through.
pub fn adjust_logits(
    tape: &mut Tape,
    logits: Var,
    gt: &GroundTruthRelations,
    wb: &WeightBias,
    d: &[f64],
) -> Result<Var> {
    let (p_count, n) = (gt.num_predicates(), gt.num_entities());
    if tape.shape(logits) != [p_count, n, n] || wb.w.len() != p_count || d.len() != p_count * p_count {
        return Err(CoreError::Input("adjust_logits: shape mismatch".into()));
    }
    let mut scale = vec![1.0; p_count * n * n];
    let mut shift = vec![0.0; p_count * n * n];
    for i in 0..n {
        for j in 0..n {
            let positives = gt.positives_of_pair(i, j);
            if positives.is_empty() {
                continue;
            }
            for q in 0..p_count {
                let d_max = positives.iter().map(|&p| d[p * p_count + q]).fold(f64::NEG_INFINITY, f64::max);
                let idx = (q * n + i) * n + j;
                scale[idx] = wb.w[q];
                shift[idx] = wb.b[q] + d_max;
            }
        }
    }
    let x = tape.value(logits);
    let out = Tensor::from_fn(x.shape().to_vec(), |k| scale[k] * x.data()[k] + shift[k]);
    Ok(tape.custom(&[logits], out, move |bw| {
        let g = bw.grad_out();
        bw.accumulate(logits, |gx| {
            for k in 0..gx.len() {
                gx[k] += scale[k] * g[k];
            }
        });
    }))
}
