//! The full relationship model: parameters, forward pass in training and
//! inference mode, and the training objective.

use rand::{Rng, RngCore};
use repsgg_tensor::{BoundParams, GumbelNoise, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::decoder::{
    decode, DecoderConfig, DecoderOutput, DecoderParams, EntityDetection, HeadShape, SamplingMode, VolumeVars,
};
use crate::error::{CoreError, Result};
use crate::features::{positional_embeddings_on_tape, PositionalCache, NUM_LEVELS};
use crate::losses::{
    enclosing_boxes, focal_bce, margin_ranking_loss, mask_loss, rep_point_margin_loss, GroundTruthRelations,
    LossBreakdown, LossWeights,
};
use crate::pgla::{adjust_logits, WeightBias};
use crate::relation::{
    attention_logits, final_scores, project_heads, rearrange_pairs, reduce_pairs, HeadParams, ReduceMode,
    RelationLogits,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub classes: usize,
    pub predicates: usize,
    pub decoder: DecoderConfig,
    pub head: HeadShape,
    pub hard_gumbel: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 150,
            predicates: 50,
            decoder: DecoderConfig::default(),
            head: HeadShape { heads: 128, width: 64 },
            hard_gumbel: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.predicates == 0 {
            return Err(CoreError::Config("classes and predicates must be >= 1".into()));
        }
        if self.head.heads == 0 || self.head.width == 0 {
            return Err(CoreError::Config("relation head heads and width must be >= 1".into()));
        }
        self.decoder.validate()
    }
}

/// Loss hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma_base: f64,
    pub mask_alpha: f64,
    pub mask_gamma: f64,
    pub neg_ratio: usize,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.75,
            gamma_base: 2.0,
            mask_alpha: 0.75,
            mask_gamma: 2.0,
            neg_ratio: 10,
            weights: LossWeights::default(),
        }
    }
}

/// How a forward pass samples rep-points and reduces rep-embedding pairs.
pub enum ForwardMode<'a> {
    Train { m: usize, tau: f64, rng: &'a mut dyn RngCore },
    Infer,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: RelationLogits,
    pub decoder: DecoderOutput,
}

/// Inference results as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y: Tensor,
    pub h: Tensor,
    pub scores: Tensor,
}

#[derive(Debug)]
pub struct RepSgg {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub decoder: DecoderParams,
    pub head: HeadParams,
    cache: PositionalCache,
}

impl RepSgg {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let decoder = DecoderParams::register(&mut store, &config.decoder, config.classes, rng)?;
        let head = HeadParams::register(&mut store, config.decoder.d, config.head, config.predicates, rng)?;
        Ok(RepSgg { config, store, decoder, head, cache: PositionalCache::new() })
    }

    /// Forward pass on one scene with features `v [5, H, W, d]`; `None` for
    /// a scene without entities.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        params: &BoundParams,
        detections: &[EntityDetection],
        v: &Tensor,
        mode: ForwardMode<'_>,
    ) -> Result<Option<ForwardOutput>> {
        let d = self.config.decoder.d;
        let s = v.shape();
        if s.len() != 4 || s[0] != NUM_LEVELS || s[3] != d {
            return Err(CoreError::Input(format!("feature volume must be [5, H, W, {d}], got {s:?}")));
        }
        for e in detections {
            e.validate(self.config.classes)?;
        }
        let base = self.cache.get(s[1], s[2], d)?.clone();
        let pe = positional_embeddings_on_tape(tape, &base, params.get(self.decoder.scale_embeds))?;
        let volume = VolumeVars { v: tape.constant(v.clone()), pe };
        let cfg = &self.config.decoder;
        let (out, reduce) = match mode {
            ForwardMode::Train { m, tau, rng } => {
                let out = decode(
                    tape,
                    params,
                    &self.decoder,
                    cfg,
                    detections,
                    volume,
                    SamplingMode::Train { m, rng: &mut *rng },
                )?;
                (out, ReduceMode::Train { tau, noise: GumbelNoise::Sampled(rng), hard: self.config.hard_gumbel })
            }
            ForwardMode::Infer => {
                let grid = SamplingMode::Grid { range: cfg.grid_range, step: cfg.grid_step };
                (decode(tape, params, &self.decoder, cfg, detections, volume, grid)?, ReduceMode::Infer)
            }
        };
        let Some(out) = out else { return Ok(None) };
        let st = out.state;
        let a = attention_logits(tape, params, &self.head, st.q, st.k, st.qb, st.kb)?;
        let (y_full, h_full) = project_heads(tape, params, &self.head, a)?;
        let (n, groups) = (detections.len(), cfg.groups);
        let y_pairs = rearrange_pairs(tape, y_full, n, groups)?;
        let h_pairs = rearrange_pairs(tape, h_full, n, groups)?;
        let logits = reduce_pairs(tape, y_pairs, h_pairs, reduce)?;
        Ok(Some(ForwardOutput { logits, decoder: out }))
    }

    /// Inference-mode prediction (grid rep-points, max reduction).
    pub fn predict(&mut self, detections: &[EntityDetection], v: &Tensor) -> Result<Option<Prediction>> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape, false);
        let Some(out) = self.forward(&mut tape, &params, detections, v, ForwardMode::Infer)? else {
            return Ok(None);
        };
        let y = tape.value(out.logits.y).clone();
        let h = tape.value(out.logits.h).clone();
        let scores = final_scores(&y, &h)?;
        Ok(Some(Prediction { y, h, scores }))
    }
}

/// Per-instance logit adjustment passed to [`objective`].
#[derive(Clone, Copy, Debug)]
pub struct Adjustment<'a> {
    pub wb: &'a WeightBias,
    pub d: &'a [f64],
}

fn accumulate(tape: &mut Tape, total: &mut Option<Var>, term: Option<Var>, weight: f64) -> Result<f64> {
    let Some(term) = term else { return Ok(0.0) };
    let value = tape.value(term).item();
    if weight != 0.0 {
        let scaled = tape.scale(term, weight);
        *total = Some(match *total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    Ok(value)
}

/// Weighted loss suite on one scene. The focal BCE sees the adjusted
/// predicate logits; the margin ranking loss sees the raw ones. `None` if no
/// term applies (a scene without relations).
#[allow(clippy::too_many_arguments)]
pub fn objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    out: &ForwardOutput,
    detections: &[EntityDetection],
    gt: &GroundTruthRelations,
    cfg: &LossConfig,
    gammas: &[f64],
    adjustment: Option<Adjustment<'_>>,
    rng: &mut R,
) -> Result<Option<(Var, LossBreakdown)>> {
    let y = out.logits.y;
    let y_focal = match adjustment {
        Some(adj) => adjust_logits(tape, y, gt, adj.wb, adj.d)?,
        None => y,
    };
    let w = cfg.weights;
    let mut total = None;
    let mut parts = LossBreakdown::default();
    let focal = focal_bce(tape, y_focal, gt, cfg.alpha, gammas)?;
    parts.focal_predicate = accumulate(tape, &mut total, focal, w.focal)?;
    let mask = mask_loss(tape, out.logits.h, gt, cfg.mask_alpha, cfg.mask_gamma, cfg.neg_ratio, rng)?;
    parts.mask = accumulate(tape, &mut total, mask, w.mask)?;
    let rank = margin_ranking_loss(tape, y, gt)?;
    parts.margin_rank = accumulate(tape, &mut total, rank, w.margin_rank)?;
    let boxes = enclosing_boxes(detections, gt.triplets());
    let reference = &out.decoder.reference;
    let mu_s: Vec<Var> = out.decoder.layers.iter().map(|l| l.dist_s.mu).collect();
    let mu_o: Vec<Var> = out.decoder.layers.iter().map(|l| l.dist_o.mu).collect();
    let rep_s = rep_point_margin_loss(tape, reference, &mu_s, &boxes)?;
    let rep_o = rep_point_margin_loss(tape, reference, &mu_o, &boxes)?;
    parts.rep_point_margin =
        accumulate(tape, &mut total, rep_s, w.rep_point)? + accumulate(tape, &mut total, rep_o, w.rep_point)?;
    let Some(total) = total else { return Ok(None) };
    parts.total = tape.value(total).item();
    Ok(Some((total, parts)))
}
