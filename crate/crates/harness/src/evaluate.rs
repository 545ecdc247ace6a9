//! Inference over a split and PredCls metrics.

use std::io::Write;
use std::path::Path;

use repsgg_core::eval::{
    mean_recall_at_k, mean_scene_recall_at_k, per_predicate_recall_at_k, rank_triplets, rank_triplets_constrained,
    zero_shot_filter, RankedTriplet,
};
use repsgg_core::losses::Triplet;
use serde::Serialize;

use crate::dataset::{Split, SplitFile};
use crate::error::{HarnessError, Result};
use crate::train::load_model;

pub const TASK: &str = "predcls";

/// One line of the metrics CSV; `value` is `None` when the metric is
/// undefined (e.g. no zero-shot ground truth).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub split: String,
    pub task: String,
    pub metric: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub value: Option<f64>,
    pub predicate: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub split: Split,
    pub ks: Vec<usize>,
    pub graph_constraint: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { split: Split::Test, ks: vec![20, 50, 100], graph_constraint: false }
    }
}

/// Looks up a metric value in a set of rows.
pub fn metric_value(rows: &[MetricRow], metric: &str, k: usize) -> Option<f64> {
    rows.iter().find(|r| r.metric == metric && r.k == k && r.predicate.is_none()).and_then(|r| r.value)
}

/// Computes all metric rows from per-scene rankings.
pub fn metric_rows(
    split: Split,
    scenes: &[(Vec<RankedTriplet>, Vec<Triplet>)],
    zero_shot: &[(Vec<RankedTriplet>, Vec<Triplet>)],
    ks: &[usize],
    predicates: usize,
) -> Vec<MetricRow> {
    let row = |metric: &str, k: usize, value: Option<f64>, predicate: Option<usize>| MetricRow {
        split: split.name().into(),
        task: TASK.into(),
        metric: metric.into(),
        k,
        value,
        predicate,
    };
    let mut rows = Vec::new();
    for &k in ks {
        rows.push(row("R", k, mean_scene_recall_at_k(scenes, k), None));
        rows.push(row("mR", k, mean_recall_at_k(scenes, k, predicates), None));
        rows.push(row("zsR", k, mean_scene_recall_at_k(zero_shot, k), None));
        rows.push(row("zsmR", k, mean_recall_at_k(zero_shot, k, predicates), None));
    }
    for &k in ks {
        for (p, v) in per_predicate_recall_at_k(scenes, k, predicates).into_iter().enumerate() {
            rows.push(row("R", k, v, Some(p)));
        }
    }
    rows
}

/// Runs inference-mode prediction on every scene of a split.
pub fn evaluate(checkpoint: &Path, data: &Path, opts: &EvalOptions) -> Result<Vec<MetricRow>> {
    if opts.ks.is_empty() || opts.ks.contains(&0) {
        return Err(HarnessError::Config("K values must be >= 1".into()));
    }
    let (mut model, meta) = load_model(checkpoint)?;
    let split = SplitFile::read(&data.join(opts.split.file_name()))?;
    let predicates = split.num_predicates();
    if predicates != meta.model.predicates {
        return Err(HarnessError::Config(format!(
            "checkpoint has {} predicates but the dataset has {predicates}",
            meta.model.predicates
        )));
    }
    let registry = split.registry();
    let samples = split.samples(meta.model.classes)?;
    let sigs = meta.features.class_signatures(meta.model.classes, meta.model.decoder.d);
    let mut scenes = Vec::with_capacity(samples.len());
    let mut zero_shot = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let v = meta.features.scene_features(&sigs, s, opts.split, i)?;
        let ranked = match model.predict(&s.entities, &v)? {
            Some(pred) if opts.graph_constraint => rank_triplets_constrained(&pred.scores)?,
            Some(pred) => rank_triplets(&pred.scores)?,
            None => Vec::new(),
        };
        let zs = zero_shot_filter(&s.triplets, &registry, &s.classes());
        zero_shot.push((ranked.clone(), zs));
        scenes.push((ranked, s.triplets.clone()));
    }
    Ok(metric_rows(opts.split, &scenes, &zero_shot, &opts.ks, predicates))
}

/// Writes rows as CSV; undefined values are written as `NA`.
pub fn write_metrics<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["split", "task", "metric", "K", "value", "predicate"])?;
    for r in rows {
        let value = r.value.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let predicate = r.predicate.map_or_else(String::new, |p| p.to_string());
        w.write_record([r.split.as_str(), r.task.as_str(), r.metric.as_str(), &r.k.to_string(), &value, &predicate])?;
    }
    w.flush().map_err(|e| HarnessError::io("<metrics>", e))?;
    Ok(())
}
