//! Training loop: forward, logit adjustment, losses, AdamW step, logs and
//! checkpoint.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repsgg_core::decoder::DecoderParams;
use repsgg_core::losses::{predicate_gammas, GroundTruthRelations, LossBreakdown};
use repsgg_core::model::{objective, Adjustment, ForwardMode, ModelConfig, RepSgg};
use repsgg_core::pgla::{PglaState, WeightBias};
use repsgg_core::relation::{annealing_temperature, final_scores};
use repsgg_tensor::{Checkpoint, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{PglaMode, RunConfig};
use crate::dataset::{SceneSample, Split, SplitFile};
use crate::error::{HarnessError, Result};
use crate::features::FeatureConfig;
use crate::optim::AdamW;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const PGLA_TRACE_FILE: &str = "pgla_trace.csv";
pub const PGLA_STATE_FILE: &str = "pgla_state.json";

/// Everything needed to rebuild a model from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub iterations: usize,
}

#[derive(Debug, Serialize)]
struct LogRow {
    iter: usize,
    scene: usize,
    lr: f64,
    tau: f64,
    m: usize,
    focal_predicate: f64,
    mask: f64,
    margin_rank: f64,
    rep_point_margin: f64,
    total: f64,
}

#[derive(Debug, Serialize)]
struct TraceRow {
    iter: usize,
    predicate: usize,
    r: f64,
    w: f64,
    b: f64,
    d_row_max: f64,
}

/// Paths of the files written by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub trace: PathBuf,
    pub final_loss: LossBreakdown,
}

/// Static adjustment for the LA baseline.
fn la_weights(pi: &[f64]) -> WeightBias {
    WeightBias { w: vec![1.0; pi.len()], b: pi.iter().map(|p| p.ln()).collect() }
}

fn learning_rate(cfg: &RunConfig, iter: usize) -> f64 {
    let decay_iter = (cfg.optim.decay_at * cfg.iterations as f64).ceil() as usize;
    if iter >= decay_iter {
        cfg.optim.learning_rate * cfg.optim.decay_factor
    } else {
        cfg.optim.learning_rate
    }
}

struct TrainScene {
    sample: SceneSample,
    gt: GroundTruthRelations,
    features: Tensor,
}

fn load_scenes(cfg: &RunConfig) -> Result<(SplitFile, Vec<TrainScene>)> {
    let split = SplitFile::read(&cfg.data.join(Split::Train.file_name()))?;
    let p = split.num_predicates();
    if p != cfg.model.predicates {
        return Err(HarnessError::Config(format!(
            "model has {} predicates but the dataset has {p}",
            cfg.model.predicates
        )));
    }
    let samples = split.samples(cfg.model.classes)?;
    let sigs = cfg.features.class_signatures(cfg.model.classes, cfg.model.decoder.d);
    let feats = cfg.features.split_features(&sigs, &samples, Split::Train)?;
    let scenes = samples
        .into_iter()
        .zip(feats)
        .map(|(sample, features)| {
            let gt = sample.ground_truth(p)?;
            Ok(TrainScene { sample, gt, features })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((split, scenes))
}

/// Cycles through the scenes with relations in freshly shuffled epochs.
struct SceneOrder {
    pool: Vec<usize>,
    queue: Vec<usize>,
}

impl SceneOrder {
    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.queue.is_empty() {
            self.queue = self.pool.clone();
            self.queue.shuffle(rng);
            self.queue.reverse();
        }
        self.queue.pop().expect("non-empty pool")
    }
}

fn write_trace(w: &mut csv::Writer<File>, iter: usize, state: &PglaState, wb: &WeightBias) -> Result<()> {
    let dmax = state.d_row_max();
    for p in 0..state.num_predicates() {
        w.serialize(TraceRow { iter, predicate: p, r: state.r[p], w: wb.w[p], b: wb.b[p], d_row_max: dmax[p] })?;
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

/// Trains a model and writes the checkpoint, loss log and PGLA trace to `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutputs> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let (split, scenes) = load_scenes(cfg)?;
    let pool: Vec<usize> = (0..scenes.len()).filter(|&i| !scenes[i].sample.triplets.is_empty()).collect();
    if pool.is_empty() {
        return Err(HarnessError::Data("training split has no relations".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = RepSgg::new(cfg.model.clone(), &mut rng)?;
    let sampler_mult = cfg.optim.lr_multiplier_sampler;
    let mut optim = AdamW::new(cfg.optim.clone(), &model.store, |name| {
        if DecoderParams::is_sampler_param(name) {
            sampler_mult
        } else {
            1.0
        }
    });
    let mut pgla = PglaState::new(split.priors.clone(), cfg.pgla.lambda, cfg.pgla.metric, cfg.pgla.ema_base)?;
    let gammas = predicate_gammas(&split.priors, cfg.loss.gamma_base);
    let la = la_weights(&split.priors);
    let zero_d = vec![0.0; split.priors.len().pow(2)];
    let mut order = SceneOrder { pool, queue: Vec::new() };

    let log_path = out.join(TRAIN_LOG_FILE);
    let trace_path = out.join(PGLA_TRACE_FILE);
    let mut log = csv_writer(&log_path)?;
    let mut trace = csv_writer(&trace_path)?;
    let mut last = LossBreakdown::default();

    for iter in 0..cfg.iterations {
        let lr = learning_rate(cfg, iter);
        let tau = annealing_temperature(iter, cfg.iterations)?;
        let m = rng.gen_range(cfg.sample_range[0]..=cfg.sample_range[1]);
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| order.next(&mut rng)).collect();

        let mut tapes = Vec::with_capacity(batch.len());
        for &idx in &batch {
            let s = &scenes[idx];
            let mut tape = Tape::new();
            let params = model.store.bind(&mut tape, true);
            let fwd = model
                .forward(
                    &mut tape,
                    &params,
                    &s.sample.entities,
                    &s.features,
                    ForwardMode::Train { m, tau, rng: &mut rng },
                )?
                .expect("scenes with relations have entities");
            tapes.push((tape, params, fwd));
        }

        let values: Vec<(Tensor, Tensor)> = tapes
            .iter()
            .map(|(tape, _, fwd)| {
                let y = tape.value(fwd.logits.y).clone();
                let scores = final_scores(&y, tape.value(fwd.logits.h))?;
                Ok((y, scores))
            })
            .collect::<Result<_>>()?;
        let score_batch: Vec<_> = values.iter().zip(&batch).map(|((_, s), &i)| (s, &scenes[i].gt)).collect();
        let logit_batch: Vec<_> = values.iter().zip(&batch).map(|((y, _), &i)| (y, &scenes[i].gt)).collect();
        pgla.update_metric(&score_batch)?;
        pgla.update_confusion(&logit_batch)?;
        pgla.iter += 1;
        let wb = pgla.compute_wb();
        let adjustment = match cfg.pgla.mode {
            PglaMode::Off => None,
            PglaMode::La => Some(Adjustment { wb: &la, d: &zero_d }),
            PglaMode::On => Some(Adjustment { wb: &wb, d: &pgla.d }),
        };

        let mut grads: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        let mut sum = LossBreakdown::default();
        for ((mut tape, params, fwd), &idx) in tapes.into_iter().zip(&batch) {
            let s = &scenes[idx];
            let Some((loss, parts)) =
                objective(&mut tape, &fwd, &s.sample.entities, &s.gt, &cfg.loss, &gammas, adjustment, &mut rng)?
            else {
                continue;
            };
            if let Some(term) = parts.non_finite_term() {
                return Err(HarnessError::NonFinite { term, iter });
            }
            tape.backward(loss)?;
            params.store_grads(&tape, &mut model.store);
            for (acc, (_, p)) in grads.iter_mut().zip(model.store.iter()) {
                if let Some(g) = &p.tensor.grad {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            sum.focal_predicate += parts.focal_predicate;
            sum.mask += parts.mask;
            sum.margin_rank += parts.margin_rank;
            sum.rep_point_margin += parts.rep_point_margin;
            sum.total += parts.total;
        }
        let scale = 1.0 / batch.len() as f64;
        for (g, (_, p)) in grads.into_iter().zip(model.store.iter_mut()) {
            p.tensor.grad = Some(g.into_iter().map(|x| x * scale).collect());
        }
        if !AdamW::grad_norm(&model.store).is_finite() {
            return Err(HarnessError::NonFinite { term: "gradient", iter });
        }
        optim.step(&mut model.store, lr);

        last = LossBreakdown {
            focal_predicate: sum.focal_predicate * scale,
            mask: sum.mask * scale,
            margin_rank: sum.margin_rank * scale,
            rep_point_margin: sum.rep_point_margin * scale,
            total: sum.total * scale,
        };
        log.serialize(LogRow {
            iter,
            scene: batch[0],
            lr,
            tau,
            m,
            focal_predicate: last.focal_predicate,
            mask: last.mask,
            margin_rank: last.margin_rank,
            rep_point_margin: last.rep_point_margin,
            total: last.total,
        })?;
        if iter % cfg.pgla.trace_every == 0 || iter + 1 == cfg.iterations {
            let shown = match cfg.pgla.mode {
                PglaMode::Off => WeightBias { w: vec![1.0; wb.w.len()], b: vec![0.0; wb.b.len()] },
                PglaMode::La => la.clone(),
                PglaMode::On => wb,
            };
            write_trace(&mut trace, iter, &pgla, &shown)?;
        }
    }
    log.flush().map_err(|e| HarnessError::io(&log_path, e))?;
    trace.flush().map_err(|e| HarnessError::io(&trace_path, e))?;

    let meta = CheckpointMeta { model: cfg.model.clone(), features: cfg.features.clone(), iterations: cfg.iterations };
    let meta = serde_json::to_string(&meta).map_err(|e| HarnessError::json(out, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    Checkpoint::from_store(&model.store, meta).save(&ckpt_path)?;
    let state_path = out.join(PGLA_STATE_FILE);
    let state = serde_json::to_string_pretty(&pgla).map_err(|e| HarnessError::json(&state_path, e))?;
    fs::write(&state_path, state).map_err(|e| HarnessError::io(&state_path, e))?;
    Ok(TrainOutputs { checkpoint: ckpt_path, log: log_path, trace: trace_path, final_loss: last })
}

/// Rebuilds a model from a checkpoint written by [`train`].
pub fn load_model(path: &Path) -> Result<(RepSgg, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata).map_err(|e| HarnessError::json(path, e))?;
    // Initial values are overwritten by the checkpoint.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = RepSgg::new(meta.model.clone(), &mut rng)?;
    ckpt.load_into(&mut model.store)?;
    Ok((model, meta))
}
