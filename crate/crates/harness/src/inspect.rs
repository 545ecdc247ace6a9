//! Rep-point dumps and PGLA trace filtering.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repsgg_core::model::ForwardMode;
use repsgg_tensor::Tape;
use serde::{Deserialize, Serialize};

use crate::dataset::{Split, SplitFile};
use crate::error::{HarnessError, Result};
use crate::train::load_model;

/// One sampled rep-point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepPointRow {
    pub sampler: String,
    pub entity: usize,
    pub group: usize,
    pub layer: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Training-mode draws (`Some(m)`) or the inference grid (`None`).
#[derive(Clone, Copy, Debug)]
pub struct PointOptions {
    pub split: Split,
    pub scene: usize,
    pub train_draws: Option<usize>,
    pub seed: u64,
}

/// Rep-points of every sampler, layer, entity and group of one scene.
pub fn sample_points(checkpoint: &Path, data: &Path, opts: &PointOptions) -> Result<Vec<RepPointRow>> {
    let (mut model, meta) = load_model(checkpoint)?;
    let split = SplitFile::read(&data.join(opts.split.file_name()))?;
    let samples = split.samples(meta.model.classes)?;
    let scene = samples
        .get(opts.scene)
        .ok_or_else(|| HarnessError::Config(format!("scene {} out of range ({} scenes)", opts.scene, samples.len())))?;
    let sigs = meta.features.class_signatures(meta.model.classes, meta.model.decoder.d);
    let v = meta.features.scene_features(&sigs, scene, opts.split, opts.scene)?;
    let mut tape = Tape::new();
    let params = model.store.bind(&mut tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mode = match opts.train_draws {
        Some(m) => ForwardMode::Train { m, tau: 1.0, rng: &mut rng },
        None => ForwardMode::Infer,
    };
    let Some(out) = model.forward(&mut tape, &params, &scene.entities, &v, mode)? else {
        return Ok(Vec::new());
    };
    let mut rows = Vec::new();
    for (layer, trace) in out.decoder.layers.iter().enumerate() {
        for (name, var) in [("subject", trace.points_s), ("object", trace.points_o)] {
            let t = tape.value(var);
            let s = t.shape();
            let (n, k, m) = (s[0], s[1], s[2]);
            for e in 0..n {
                for g in 0..k {
                    for j in 0..m {
                        let base = ((e * k + g) * m + j) * 3;
                        let c = &t.data()[base..base + 3];
                        rows.push(RepPointRow {
                            sampler: name.into(),
                            entity: e,
                            group: g,
                            layer,
                            x: c[0],
                            y: c[1],
                            z: c[2],
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_points<W: Write>(rows: &[RepPointRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io("<points>", e))?;
    Ok(())
}

/// Copies a PGLA trace, keeping only the requested predicate and every
/// `every`-th logged iteration.
pub fn filter_trace<R: Read, W: Write>(input: R, out: W, predicate: Option<usize>, every: usize) -> Result<usize> {
    let mut reader = csv::Reader::from_reader(input);
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(reader.headers()?)?;
    let mut kept = 0;
    let mut iters_seen: Vec<String> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let iter = rec.get(0).unwrap_or_default().to_string();
        if iters_seen.last() != Some(&iter) {
            iters_seen.push(iter);
        }
        if (iters_seen.len() - 1) % every.max(1) != 0 {
            continue;
        }
        if let Some(p) = predicate {
            if rec.get(1).and_then(|v| v.parse::<usize>().ok()) != Some(p) {
                continue;
            }
        }
        writer.write_record(&rec)?;
        kept += 1;
    }
    writer.flush().map_err(|e| HarnessError::io("<trace>", e))?;
    Ok(kept)
}
