//! Entity queries and keys, box embeddings, and the stacked decoder layers
//! (group cross-attention on sampled rep-points followed by two-way
//! relational cross-attention).

use rand::{Rng, RngCore};
use repsgg_tensor::{BoundParams, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::features::NUM_LEVELS;
use crate::layers::{merge_heads, split_heads, FeedForward, LayerNorm, Linear};
use crate::sampler::{
    accumulate_points, draw_training_offsets, inference_grid_offsets, point_sample, predict_offsets,
    OffsetDistribution, ReferencePoints, SamplerParams, ScaleInterp,
};

/// One detected (or ground-truth) entity with a box in normalised image
/// coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityDetection {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub scale_level: usize,
    pub class_label: usize,
}

impl EntityDetection {
    pub fn new(bbox: [f64; 4], scale_level: usize, class_label: usize) -> Result<Self> {
        let e = EntityDetection { bbox, scale_level, class_label };
        e.validate(usize::MAX)?;
        Ok(e)
    }

    /// Checks box ordering and ranges against `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let [x0, y0, x1, y1] = self.bbox;
        let in_unit = self.bbox.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit || x0 >= x1 || y0 >= y1 {
            return Err(CoreError::Input(format!("invalid box {:?}", self.bbox)));
        }
        if self.scale_level >= NUM_LEVELS {
            return Err(CoreError::Input(format!("scale level {} out of range", self.scale_level)));
        }
        if self.class_label >= num_classes {
            return Err(CoreError::Input(format!("class {} out of range", self.class_label)));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.bbox;
        ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        let [x0, y0, x1, y1] = self.bbox;
        (x1 - x0).hypot(y1 - y0)
    }

    /// Normalised scale coordinate `z / 4`.
    pub fn z(&self) -> f64 {
        self.scale_level as f64 / (NUM_LEVELS - 1) as f64
    }

    /// Reference point `P⁰`.
    pub fn reference_point(&self) -> [f64; 3] {
        let (cx, cy) = self.center();
        [cx, cy, self.z()]
    }
}

/// Class-indexed subject and object rep-embeddings, each `[C, K, d]`.
#[derive(Clone, Copy, Debug)]
pub struct RepEmbeddings {
    pub subject: ParamId,
    pub object: ParamId,
}

impl RepEmbeddings {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        classes: usize,
        groups: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if groups == 0 {
            return Err(CoreError::Config("number of rep-embeddings K must be >= 1".into()));
        }
        let subject = store.register("rep_embeds.subject", Tensor::randn(vec![classes, groups, d], 1.0, rng))?;
        let object = store.register("rep_embeds.object", Tensor::randn(vec![classes, groups, d], 1.0, rng))?;
        Ok(RepEmbeddings { subject, object })
    }
}

/// Corner, role and projection parameters of the box embeddings.
#[derive(Clone, Copy, Debug)]
pub struct BoxEmbedParams {
    pub corner_embeds: ParamId,
    pub role_embeds: ParamId,
    pub proj: Linear,
}

impl BoxEmbedParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Result<Self> {
        Ok(BoxEmbedParams {
            corner_embeds: store.register("box.corner_embeds", Tensor::randn(vec![2, d], 0.1, rng))?,
            role_embeds: store.register("box.role_embeds", Tensor::randn(vec![2, d], 0.1, rng))?,
            proj: Linear::register(store, "box.proj", 2 * d, d, rng)?,
        })
    }
}

/// Multi-head attention shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub heads: usize,
    pub width: usize,
}

impl HeadShape {
    pub fn total(&self) -> usize {
        self.heads * self.width
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GcaParams {
    pub shape: HeadShape,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm: LayerNorm,
}

impl GcaParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        shape: HeadShape,
        rng: &mut R,
    ) -> Result<Self> {
        let hd = shape.total();
        Ok(GcaParams {
            shape,
            q: Linear::register(store, &format!("{prefix}.q"), d, hd, rng)?,
            k: Linear::register(store, &format!("{prefix}.k"), d, hd, rng)?,
            v: Linear::register(store, &format!("{prefix}.v"), d, hd, rng)?,
            out: Linear::register(store, &format!("{prefix}.out"), hd, d, rng)?,
            norm: LayerNorm::register(store, &format!("{prefix}.norm"), d)?,
        })
    }
}

/// One side (queries or keys) of the relational cross-attention.
#[derive(Clone, Copy, Debug)]
pub struct RcaSide {
    pub proj: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_attn: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

impl RcaSide {
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        shape: HeadShape,
        rng: &mut R,
    ) -> Result<Self> {
        let hd = shape.total();
        Ok(RcaSide {
            proj: Linear::register(store, &format!("{prefix}.proj"), d, hd, rng)?,
            value: Linear::register(store, &format!("{prefix}.value"), d, hd, rng)?,
            out: Linear::register(store, &format!("{prefix}.out"), hd, d, rng)?,
            norm_attn: LayerNorm::register(store, &format!("{prefix}.norm_attn"), d)?,
            ffn: FeedForward::register(store, &format!("{prefix}.ffn"), d, 4 * d, rng)?,
            norm_ffn: LayerNorm::register(store, &format!("{prefix}.norm_ffn"), d)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RcaParams {
    pub shape: HeadShape,
    pub subject: RcaSide,
    pub object: RcaSide,
}

impl RcaParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        shape: HeadShape,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(RcaParams {
            shape,
            subject: RcaSide::register(store, &format!("{prefix}.subject"), d, shape, rng)?,
            object: RcaSide::register(store, &format!("{prefix}.object"), d, shape, rng)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerParams {
    pub sampler_s: SamplerParams,
    pub sampler_o: SamplerParams,
    pub gca_s: GcaParams,
    pub gca_o: GcaParams,
    pub rca: RcaParams,
}

/// Decoder hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub d: usize,
    pub groups: usize,
    pub layers: usize,
    pub gca: HeadShape,
    pub rca: HeadShape,
    pub scale_interp: ScaleInterp,
    pub init_sigma: f64,
    pub grid_range: usize,
    pub grid_step: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d: 256,
            groups: 4,
            layers: 1,
            gca: HeadShape { heads: 8, width: 32 },
            rca: HeadShape { heads: 8, width: 32 },
            scale_interp: ScaleInterp::Trilinear,
            init_sigma: 0.05,
            grid_range: 3,
            grid_step: 1,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 4 != 0 {
            return Err(CoreError::Config(format!("d = {} must be a positive multiple of 4", self.d)));
        }
        if self.groups == 0 {
            return Err(CoreError::Config("groups must be >= 1".into()));
        }
        for (name, s) in [("gca", self.gca), ("rca", self.rca)] {
            if s.heads == 0 || s.width == 0 {
                return Err(CoreError::Config(format!("{name} heads and width must be >= 1")));
            }
        }
        if self.grid_step == 0 {
            return Err(CoreError::Config("grid_step must be >= 1".into()));
        }
        if !(self.init_sigma > 0.0) {
            return Err(CoreError::Config("init_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// All decoder parameters.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub scale_embeds: ParamId,
    pub rep: RepEmbeddings,
    pub boxes: BoxEmbedParams,
    pub layers: Vec<DecoderLayerParams>,
}

impl DecoderParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let scale_embeds = store.register("scale_embeds", Tensor::randn(vec![NUM_LEVELS, d], 0.1, rng))?;
        let rep = RepEmbeddings::register(store, classes, cfg.groups, d, rng)?;
        let boxes = BoxEmbedParams::register(store, d, rng)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("layer{l}");
            layers.push(DecoderLayerParams {
                sampler_s: SamplerParams::register(
                    store,
                    &format!("{p}.sampler_s"),
                    cfg.groups,
                    d,
                    cfg.init_sigma,
                    rng,
                )?,
                sampler_o: SamplerParams::register(
                    store,
                    &format!("{p}.sampler_o"),
                    cfg.groups,
                    d,
                    cfg.init_sigma,
                    rng,
                )?,
                gca_s: GcaParams::register(store, &format!("{p}.gca_s"), d, cfg.gca, rng)?,
                gca_o: GcaParams::register(store, &format!("{p}.gca_o"), d, cfg.gca, rng)?,
                rca: RcaParams::register(store, &format!("{p}.rca"), d, cfg.rca, rng)?,
            });
        }
        Ok(DecoderParams { scale_embeds, rep, boxes, layers })
    }

    /// Whether a named parameter belongs to a rep-point sampler.
    pub fn is_sampler_param(name: &str) -> bool {
        name.contains(".sampler_s.") || name.contains(".sampler_o.")
    }
}

/// Visual features and positional embeddings placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct VolumeVars {
    pub v: Var,
    pub pe: Var,
}

/// Queries, keys and box embeddings between layers.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub q: Var,
    pub k: Var,
    pub qb: Var,
    pub kb: Var,
    pub p_s: ReferencePoints,
    pub p_o: ReferencePoints,
}

/// How rep-point offsets are generated in each layer.
pub enum SamplingMode<'a> {
    /// Reparameterised Gaussian draws, `m` per group.
    Train { m: usize, rng: &'a mut dyn RngCore },
    /// Deterministic σ-lattice.
    Grid { range: usize, step: usize },
}

/// Per-layer sampler outputs kept for the losses and inspection.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub dist_s: OffsetDistribution,
    pub dist_o: OffsetDistribution,
    /// `[n, K, m, 3]`
    pub points_s: Var,
    pub points_o: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub state: DecoderState,
    pub layers: Vec<LayerTrace>,
    pub reference: Tensor,
}

fn reference_points(detections: &[EntityDetection]) -> Result<Tensor> {
    let data = detections.iter().flat_map(|e| e.reference_point()).collect();
    Ok(Tensor::new(vec![detections.len(), 1, 3], data)?)
}

/// `P⁰`, `Q⁰ = E_s[c] + V⁰` and `K⁰ = E_o[c] + V⁰`; box embeddings are
/// attached separately.
pub fn init_queries_keys(
    tape: &mut Tape,
    params: &BoundParams,
    detections: &[EntityDetection],
    volume: VolumeVars,
    embeds: &RepEmbeddings,
    interp: ScaleInterp,
) -> Result<(Var, Var, ReferencePoints)> {
    let p0 = tape.constant(reference_points(detections)?);
    let v0 = point_sample(tape, volume.v, p0, interp)?;
    let classes: Vec<usize> = detections.iter().map(|e| e.class_label).collect();
    let es = tape.gather_rows(params.get(embeds.subject), &classes)?;
    let eo = tape.gather_rows(params.get(embeds.object), &classes)?;
    let q = tape.add_broadcast(es, v0)?;
    let k = tape.add_broadcast(eo, v0)?;
    let n = detections.len();
    let p0 = tape.reshape(p0, &[n, 1, 1, 3])?;
    Ok((q, k, ReferencePoints(p0)))
}

/// Subject and object box embeddings `(Qb, Kb)`, each `[n, d]`.
pub fn box_embeddings(
    tape: &mut Tape,
    params: &BoundParams,
    detections: &[EntityDetection],
    pe: Var,
    boxes: &BoxEmbedParams,
    interp: ScaleInterp,
) -> Result<(Var, Var)> {
    let n = detections.len();
    let d = tape.shape(pe)[3];
    let corners: Vec<f64> = detections
        .iter()
        .flat_map(|e| {
            let [x0, y0, x1, y1] = e.bbox;
            [x0, y0, e.z(), x1, y1, e.z()]
        })
        .collect();
    let corners = tape.constant(Tensor::new(vec![n, 2, 3], corners)?);
    let sampled = point_sample(tape, pe, corners, interp)?;
    let corner_embeds = tape.reshape(params.get(boxes.corner_embeds), &[1, 2, d])?;
    let sampled = tape.add_broadcast(sampled, corner_embeds)?;
    let flat = tape.reshape(sampled, &[n, 2 * d])?;
    let base = boxes.proj.forward(tape, params, flat)?;
    let role = params.get(boxes.role_embeds);
    let role_s = tape.gather_rows(role, &[0])?;
    let role_o = tape.gather_rows(role, &[1])?;
    let qb = tape.add_broadcast(base, role_s)?;
    let kb = tape.add_broadcast(base, role_o)?;
    Ok((qb, kb))
}

/// Group cross-attention output and its attention weights
/// `[n·K·heads, 1, m]`.
#[derive(Clone, Copy, Debug)]
pub struct GcaOutput {
    pub out: Var,
    pub weights: Var,
}

/// Each `(entity, group)` query attends over its own `m` rep-point features.
pub fn group_cross_attention(
    tape: &mut Tape,
    params: &BoundParams,
    gca: &GcaParams,
    state: Var,
    box_embed: Var,
    rep_features: Var,
    rep_pe: Var,
) -> Result<GcaOutput> {
    let s = tape.shape(rep_features).to_vec();
    let (n, k, m, d) = (s[0], s[1], s[2], s[3]);
    let HeadShape { heads, width } = gca.shape;
    let rows = n * k;

    let be = tape.reshape(box_embed, &[n, 1, d])?;
    let query_in = tape.add_broadcast(state, be)?;
    let query_in = tape.reshape(query_in, &[rows, d])?;
    let q = gca.q.forward(tape, params, query_in)?;
    let q = tape.reshape(q, &[rows * heads, 1, width])?;

    let key_in = tape.add(rep_features, rep_pe)?;
    let key_in = tape.reshape(key_in, &[rows, m, d])?;
    let kk = gca.k.forward(tape, params, key_in)?;
    let kk = tape.reshape(kk, &[rows, m, heads, width])?;
    let kk = tape.permute(kk, &[0, 2, 1, 3])?;
    let kk = tape.reshape(kk, &[rows * heads, m, width])?;

    let vals = tape.reshape(rep_features, &[rows, m, d])?;
    let vals = gca.v.forward(tape, params, vals)?;
    let vals = tape.reshape(vals, &[rows, m, heads, width])?;
    let vals = tape.permute(vals, &[0, 2, 1, 3])?;
    let vals = tape.reshape(vals, &[rows * heads, m, width])?;

    let kt = tape.transpose_last(kk)?;
    let logits = tape.bmm(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (width as f64).sqrt());
    let weights = tape.softmax(logits, 2)?;
    let att = tape.bmm(weights, vals)?;
    let att = tape.reshape(att, &[rows, heads * width])?;
    let att = gca.out.forward(tape, params, att)?;
    let att = tape.reshape(att, &[n, k, d])?;
    let res = tape.add(state, att)?;
    let out = gca.norm.forward(tape, params, res)?;
    Ok(GcaOutput { out, weights })
}

/// Relational cross-attention outputs and the two normalised weight maps,
/// each `[heads, nK, nK]`.
#[derive(Clone, Copy, Debug)]
pub struct RcaOutput {
    pub q: Var,
    pub k: Var,
    pub logits: Var,
    pub key_weights: Var,
    pub query_weights: Var,
}

fn rca_finish(tape: &mut Tape, params: &BoundParams, side: &RcaSide, input: Var, att: Var) -> Result<Var> {
    let att = merge_heads(tape, att)?;
    let att = side.out.forward(tape, params, att)?;
    let x = tape.add(input, att)?;
    let x = side.norm_attn.forward(tape, params, x)?;
    let f = side.ffn.forward(tape, params, x)?;
    let x = tape.add(x, f)?;
    side.norm_ffn.forward(tape, params, x)
}

/// Two-way attention between all subject query tokens and all object key
/// tokens: queries aggregate keys (softmax over keys) and keys aggregate
/// queries (softmax over queries).
pub fn relational_cross_attention(
    tape: &mut Tape,
    params: &BoundParams,
    rca: &RcaParams,
    q: Var,
    k: Var,
    qb: Var,
    kb: Var,
) -> Result<RcaOutput> {
    let s = tape.shape(q).to_vec();
    let (n, groups, d) = (s[0], s[1], s[2]);
    let tokens = n * groups;
    let heads = rca.shape.heads;

    let qb3 = tape.reshape(qb, &[n, 1, d])?;
    let kb3 = tape.reshape(kb, &[n, 1, d])?;
    let q_in = tape.add_broadcast(q, qb3)?;
    let k_in = tape.add_broadcast(k, kb3)?;
    let q_in = tape.reshape(q_in, &[tokens, d])?;
    let k_in = tape.reshape(k_in, &[tokens, d])?;
    let q_flat = tape.reshape(q, &[tokens, d])?;
    let k_flat = tape.reshape(k, &[tokens, d])?;

    let qh = rca.subject.proj.forward(tape, params, q_in)?;
    let qh = split_heads(tape, qh, heads)?;
    let kh = rca.object.proj.forward(tape, params, k_in)?;
    let kh = split_heads(tape, kh, heads)?;
    let vq = rca.subject.value.forward(tape, params, q_flat)?;
    let vq = split_heads(tape, vq, heads)?;
    let vk = rca.object.value.forward(tape, params, k_flat)?;
    let vk = split_heads(tape, vk, heads)?;

    let kt = tape.transpose_last(kh)?;
    let logits = tape.bmm(qh, kt)?;
    let logits = tape.scale(logits, 1.0 / (rca.shape.width as f64).sqrt());
    let key_weights = tape.softmax(logits, 2)?;
    let query_weights = tape.softmax(logits, 1)?;

    let q_att = tape.bmm(key_weights, vk)?;
    let qwt = tape.transpose_last(query_weights)?;
    let k_att = tape.bmm(qwt, vq)?;

    let q_new = rca_finish(tape, params, &rca.subject, q_flat, q_att)?;
    let k_new = rca_finish(tape, params, &rca.object, k_flat, k_att)?;
    Ok(RcaOutput {
        q: tape.reshape(q_new, &[n, groups, d])?,
        k: tape.reshape(k_new, &[n, groups, d])?,
        logits,
        key_weights,
        query_weights,
    })
}

fn sample_rep_features(tape: &mut Tape, volume: VolumeVars, points: Var, interp: ScaleInterp) -> Result<(Var, Var)> {
    let s = tape.shape(points).to_vec();
    let (n, k, m) = (s[0], s[1], s[2]);
    let flat = tape.reshape(points, &[n, k * m, 3])?;
    let feats = point_sample(tape, volume.v, flat, interp)?;
    let pe = point_sample(tape, volume.pe, flat, interp)?;
    let d = tape.shape(feats)[2];
    Ok((tape.reshape(feats, &[n, k, m, d])?, tape.reshape(pe, &[n, k, m, d])?))
}

/// Runs the full decoder; `None` for an empty detection list.
pub fn decode(
    tape: &mut Tape,
    params: &BoundParams,
    decoder: &DecoderParams,
    cfg: &DecoderConfig,
    detections: &[EntityDetection],
    volume: VolumeVars,
    mut mode: SamplingMode<'_>,
) -> Result<Option<DecoderOutput>> {
    if detections.is_empty() {
        return Ok(None);
    }
    let interp = cfg.scale_interp;
    let (q, k, p0) = init_queries_keys(tape, params, detections, volume, &decoder.rep, interp)?;
    let (qb, kb) = box_embeddings(tape, params, detections, volume.pe, &decoder.boxes, interp)?;
    let mut state = DecoderState { q, k, qb, kb, p_s: p0, p_o: p0 };
    let mut traces = Vec::with_capacity(decoder.layers.len());
    for layer in &decoder.layers {
        let dist_s = predict_offsets(tape, params, &layer.sampler_s, state.q, qb)?;
        let dist_o = predict_offsets(tape, params, &layer.sampler_o, state.k, kb)?;
        let (delta_s, delta_o) = match &mut mode {
            SamplingMode::Train { m, rng } => (
                draw_training_offsets(tape, &dist_s, *m, &mut **rng)?,
                draw_training_offsets(tape, &dist_o, *m, &mut **rng)?,
            ),
            SamplingMode::Grid { range, step } => (
                inference_grid_offsets(tape, &dist_s, *range, *step)?,
                inference_grid_offsets(tape, &dist_o, *range, *step)?,
            ),
        };
        let p_s = accumulate_points(tape, state.p_s, delta_s)?;
        let p_o = accumulate_points(tape, state.p_o, delta_o)?;
        let (fs, pes) = sample_rep_features(tape, volume, p_s.0, interp)?;
        let (fo, peo) = sample_rep_features(tape, volume, p_o.0, interp)?;
        let q1 = group_cross_attention(tape, params, &layer.gca_s, state.q, qb, fs, pes)?.out;
        let k1 = group_cross_attention(tape, params, &layer.gca_o, state.k, kb, fo, peo)?.out;
        let rca = relational_cross_attention(tape, params, &layer.rca, q1, k1, qb, kb)?;
        traces.push(LayerTrace { dist_s, dist_o, points_s: p_s.0, points_o: p_o.0 });
        state = DecoderState { q: rca.q, k: rca.k, qb, kb, p_s, p_o };
    }
    Ok(Some(DecoderOutput { state, layers: traces, reference: reference_points(detections)? }))
}
