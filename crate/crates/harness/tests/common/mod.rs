//! Fixtures shared by the harness integration tests.
#![allow(dead_code)]

use std::path::Path;

use repsgg_core::decoder::{DecoderConfig, HeadShape};
use repsgg_core::model::ModelConfig;
use repsgg_harness::config::{PglaMode, RunConfig};
use repsgg_harness::dataset::{generate_dataset, DatasetSpec};

/// The desk-scale model used throughout: d 32, K 2, one decoder layer.
pub fn desk_model(classes: usize, predicates: usize) -> ModelConfig {
    ModelConfig {
        classes,
        predicates,
        decoder: DecoderConfig {
            d: 32,
            groups: 2,
            layers: 1,
            gca: HeadShape { heads: 4, width: 8 },
            rca: HeadShape { heads: 4, width: 8 },
            ..Default::default()
        },
        head: HeadShape { heads: 8, width: 8 },
        hard_gumbel: false,
    }
}

pub fn run_config(data: &Path, spec: &DatasetSpec, iterations: usize, mode: PglaMode, seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        data: data.to_path_buf(),
        model: desk_model(spec.classes, spec.predicates),
        iterations,
        seed,
        ..Default::default()
    };
    cfg.pgla.mode = mode;
    cfg
}

pub fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec { train_scenes: 12, test_scenes: 6, seed, ..Default::default() }
}

pub fn write_dataset(spec: &DatasetSpec, dir: &Path) {
    generate_dataset(spec).unwrap().write(dir).unwrap();
}
