//! Synthetic scene datasets with Zipf-distributed predicates and their JSON
//! split files.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use repsgg_core::decoder::EntityDetection;
use repsgg_core::eval::ZeroShotRegistry;
use repsgg_core::features::NUM_LEVELS;
use repsgg_core::losses::{GroundTruthRelations, Triplet};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Geometry and class constraints of one predicate: the object sits at
/// `distance` from the subject along `angle_deg` (image axes, y down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRule {
    pub predicate: usize,
    pub angle_deg: f64,
    pub distance: f64,
    pub subject_classes: Vec<usize>,
    pub object_classes: Vec<usize>,
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub classes: usize,
    pub predicates: usize,
    /// Inclusive range of related entities per scene.
    pub entities_per_scene: [usize; 2],
    /// Inclusive range of unrelated entities per scene.
    pub distractors: [usize; 2],
    pub zipf_exponent: f64,
    /// Explicit rules, one per predicate; generated when absent.
    pub triplet_rules: Option<Vec<TripletRule>>,
    /// Number of distinct geometries shared by the generated rules
    /// (predicates `p` and `p + F` share one); defaults to one per predicate.
    pub geometry_families: Option<usize>,
    /// Fraction of classes allowed on each side of a generated rule.
    pub class_fraction: f64,
    /// Fraction of `(class, predicate, class)` combinations withheld from
    /// the training split.
    pub zero_shot_fraction: f64,
    /// Square image side in synthetic pixels.
    pub image_size: usize,
    /// Range of normalised box side lengths.
    pub box_size: [f64; 2],
    /// Standard deviation of the object placement noise.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            train_scenes: 200,
            test_scenes: 100,
            classes: 6,
            predicates: 5,
            entities_per_scene: [3, 6],
            distractors: [0, 1],
            zipf_exponent: 1.0,
            triplet_rules: None,
            geometry_families: None,
            class_fraction: 0.5,
            zero_shot_fraction: 0.1,
            image_size: 128,
            box_size: [0.12, 0.3],
            jitter: 0.02,
            seed: 0,
        }
    }
}

/// One entity as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub scale: usize,
}

/// One scene as stored on disk; triplets are `[subject, predicate, object]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image_size: [usize; 2],
    pub entities: Vec<EntityRecord>,
    pub triplets: Vec<[usize; 3]>,
}

/// One split document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub scenes: Vec<SceneRecord>,
    pub priors: Vec<f64>,
    pub seen_triples: Vec<[usize; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.json",
            Split::Test => "test.json",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Scene with validated detections and triplets in the order of the record.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image_size: (usize, usize),
    pub entities: Vec<EntityDetection>,
    pub triplets: Vec<Triplet>,
}

impl SceneSample {
    pub fn from_record(rec: &SceneRecord, classes: usize, predicates: usize) -> Result<Self> {
        let entities = rec
            .entities
            .iter()
            .map(|e| {
                let det = EntityDetection { bbox: e.bbox, scale_level: e.scale, class_label: e.class };
                det.validate(classes).map(|_| det)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut seen = BTreeSet::new();
        let mut triplets = Vec::with_capacity(rec.triplets.len());
        for &[s, p, o] in &rec.triplets {
            if s >= entities.len() || o >= entities.len() || p >= predicates || s == o {
                return Err(HarnessError::Data(format!("invalid triplet [{s}, {p}, {o}]")));
            }
            if !seen.insert((s, p, o)) {
                return Err(HarnessError::Data(format!("duplicate triplet [{s}, {p}, {o}]")));
            }
            triplets.push((s, p, o));
        }
        Ok(SceneSample { image_size: (rec.image_size[0], rec.image_size[1]), entities, triplets })
    }

    pub fn ground_truth(&self, predicates: usize) -> Result<GroundTruthRelations> {
        Ok(GroundTruthRelations::new(predicates, self.entities.len(), &self.triplets)?)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entities.iter().map(|e| e.class_label).collect()
    }
}

impl SplitFile {
    pub fn num_predicates(&self) -> usize {
        self.priors.len()
    }

    pub fn registry(&self) -> ZeroShotRegistry {
        let mut r = ZeroShotRegistry::new();
        for &[s, p, o] in &self.seen_triples {
            r.insert(s, p, o);
        }
        r
    }

    pub fn samples(&self, classes: usize) -> Result<Vec<SceneSample>> {
        let p = self.num_predicates();
        self.scenes.iter().map(|s| SceneSample::from_record(s, classes, p)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| HarnessError::json(path, e))?;
        fs::write(path, text).map_err(|e| HarnessError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::json(path, e))
    }
}

/// Train and test splits of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: SplitFile,
    pub test: SplitFile,
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        self.train.write(&dir.join(Split::Train.file_name()))?;
        self.test.write(&dir.join(Split::Test.file_name()))
    }
}

/// `π_p ∝ (p + 1)^(−s)`.
pub fn zipf_probabilities(predicates: usize, exponent: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..predicates).map(|p| ((p + 1) as f64).powf(-exponent)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Scale level from the box diagonal in pixels.
pub fn scale_level(diag_px: f64) -> usize {
    let z = (diag_px / 32.0).log2().floor();
    if z.is_nan() || z < 0.0 {
        0
    } else {
        (z as usize).min(NUM_LEVELS - 1)
    }
}

/// Smoothed training priors `(count_p + 1) / (N + P)`.
pub fn smoothed_priors(scenes: &[SceneRecord], predicates: usize) -> Vec<f64> {
    let mut counts = vec![1.0; predicates];
    for s in scenes {
        for t in &s.triplets {
            counts[t[1]] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    counts.into_iter().map(|c| c / total).collect()
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HarnessError::Generation(m));
        if self.classes == 0 || self.predicates == 0 {
            return err("classes and predicates must be >= 1".into());
        }
        let [lo, hi] = self.entities_per_scene;
        if lo < 2 || hi < lo {
            return err(format!("entities_per_scene {:?} must satisfy 2 <= min <= max", self.entities_per_scene));
        }
        if self.distractors[1] < self.distractors[0] {
            return err("distractor range is reversed".into());
        }
        let [a, b] = self.box_size;
        if !(a > 0.0 && a <= b && b < 1.0) {
            return err(format!("box_size {:?} must satisfy 0 < min <= max < 1", self.box_size));
        }
        if !(0.0..1.0).contains(&self.zero_shot_fraction) {
            return err("zero_shot_fraction must lie in [0, 1)".into());
        }
        if !(self.class_fraction > 0.0 && self.class_fraction <= 1.0) {
            return err("class_fraction must lie in (0, 1]".into());
        }
        if !(self.zipf_exponent >= 0.0) || !(self.jitter >= 0.0) || self.image_size < 8 {
            return err("zipf_exponent and jitter must be >= 0 and image_size >= 8".into());
        }
        Ok(())
    }

    /// Explicit rules after validation, or generated ones.
    pub fn rules<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<TripletRule>> {
        if let Some(rules) = &self.triplet_rules {
            if rules.len() != self.predicates {
                return Err(HarnessError::Generation(format!(
                    "{} rules given for {} predicates",
                    rules.len(),
                    self.predicates
                )));
            }
            let mut rules = rules.clone();
            rules.sort_by_key(|r| r.predicate);
            for (p, r) in rules.iter().enumerate() {
                if r.predicate != p {
                    return Err(HarnessError::Generation("each predicate needs exactly one rule".into()));
                }
                if r.subject_classes.is_empty() || r.object_classes.is_empty() {
                    return Err(HarnessError::Generation(format!("rule for predicate {p} has an empty class set")));
                }
                if r.subject_classes.iter().chain(&r.object_classes).any(|&c| c >= self.classes) {
                    return Err(HarnessError::Generation(format!("rule for predicate {p} names an unknown class")));
                }
                if !(r.distance > 0.0 && r.distance < 1.0) || !r.angle_deg.is_finite() {
                    return Err(HarnessError::Generation(format!("rule for predicate {p} has an unusable offset")));
                }
            }
            return Ok(rules);
        }
        let families = self.geometry_families.unwrap_or(self.predicates).clamp(1, self.predicates);
        let per_side = ((self.classes as f64 * self.class_fraction).round() as usize).clamp(1, self.classes);
        let all: Vec<usize> = (0..self.classes).collect();
        Ok((0..self.predicates)
            .map(|p| {
                let f = p % families;
                let mut subject_classes: Vec<usize> = all.choose_multiple(rng, per_side).copied().collect();
                let mut object_classes: Vec<usize> = all.choose_multiple(rng, per_side).copied().collect();
                subject_classes.sort_unstable();
                object_classes.sort_unstable();
                TripletRule {
                    predicate: p,
                    angle_deg: 360.0 * f as f64 / families as f64,
                    distance: if (f / 8) % 2 == 0 { 0.3 } else { 0.2 },
                    subject_classes,
                    object_classes,
                }
            })
            .collect())
    }
}

/// Combinations withheld from training, keeping at least one combination
/// per predicate.
fn choose_held_out<R: Rng + ?Sized>(
    rules: &[TripletRule],
    fraction: f64,
    rng: &mut R,
) -> BTreeSet<(usize, usize, usize)> {
    let mut combos = Vec::new();
    for r in rules {
        for &s in &r.subject_classes {
            for &o in &r.object_classes {
                combos.push((s, r.predicate, o));
            }
        }
    }
    let target = (combos.len() as f64 * fraction).round() as usize;
    combos.shuffle(rng);
    let mut remaining: Vec<usize> = rules.iter().map(|r| r.subject_classes.len() * r.object_classes.len()).collect();
    let mut held = BTreeSet::new();
    for c in combos {
        if held.len() == target {
            break;
        }
        if remaining[c.1] > 1 {
            remaining[c.1] -= 1;
            held.insert(c);
        }
    }
    held
}

struct SceneBuilder<'a> {
    spec: &'a DatasetSpec,
    rules: &'a [TripletRule],
    held_out: Option<&'a BTreeSet<(usize, usize, usize)>>,
}

const PLACEMENT_ATTEMPTS: usize = 64;

impl SceneBuilder<'_> {
    fn random_box<R: Rng + ?Sized>(&self, rng: &mut R, center: Option<(f64, f64)>) -> Option<[f64; 4]> {
        let [a, b] = self.spec.box_size;
        let w = rng.gen_range(a..=b);
        let h = rng.gen_range(a..=b);
        let (cx, cy) = match center {
            Some(c) => c,
            None => (rng.gen_range(w / 2.0..=1.0 - w / 2.0), rng.gen_range(h / 2.0..=1.0 - h / 2.0)),
        };
        let bx = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
        bx.iter().all(|v| (0.0..=1.0).contains(v)).then_some(bx)
    }

    fn entity(&self, class: usize, bbox: [f64; 4]) -> EntityRecord {
        let diag = (bbox[2] - bbox[0]).hypot(bbox[3] - bbox[1]) * self.spec.image_size as f64;
        EntityRecord { class, bbox, scale: scale_level(diag) }
    }

    fn allowed(&self, s: usize, p: usize, o: usize) -> bool {
        self.held_out.map_or(true, |h| !h.contains(&(s, p, o)))
    }

    /// Adds one entity related to an existing one by predicate `p`.
    fn grow<R: Rng + ?Sized>(&self, rng: &mut R, entities: &mut Vec<EntityRecord>, p: usize) -> Option<[usize; 3]> {
        let rule = &self.rules[p];
        let normal = Normal::new(0.0, self.spec.jitter.max(1e-12)).ok()?;
        let (dx, dy) = {
            let t = rule.angle_deg.to_radians();
            (rule.distance * t.cos(), rule.distance * t.sin())
        };
        for _ in 0..PLACEMENT_ATTEMPTS {
            let anchor = rng.gen_range(0..entities.len());
            let new_is_object = rng.gen_bool(0.5);
            let a = &entities[anchor];
            let (ax, ay) = ((a.bbox[0] + a.bbox[2]) / 2.0, (a.bbox[1] + a.bbox[3]) / 2.0);
            let (sign, anchor_ok, pool) = if new_is_object {
                (1.0, rule.subject_classes.contains(&a.class), &rule.object_classes)
            } else {
                (-1.0, rule.object_classes.contains(&a.class), &rule.subject_classes)
            };
            if !anchor_ok {
                continue;
            }
            let class = *pool.choose(rng)?;
            let (s_cls, o_cls) = if new_is_object { (a.class, class) } else { (class, a.class) };
            if !self.allowed(s_cls, p, o_cls) {
                continue;
            }
            let cx = ax + sign * dx + normal.sample(rng);
            let cy = ay + sign * dy + normal.sample(rng);
            if let Some(bx) = self.random_box(rng, Some((cx, cy))) {
                let idx = entities.len();
                entities.push(self.entity(class, bx));
                return Some(if new_is_object { [anchor, p, idx] } else { [idx, p, anchor] });
            }
        }
        None
    }

    fn scene<R: Rng + ?Sized>(&self, rng: &mut R, zipf: &WeightedIndex<f64>) -> SceneRecord {
        let [lo, hi] = self.spec.entities_per_scene;
        let target = rng.gen_range(lo..=hi);
        let mut entities = Vec::with_capacity(target + self.spec.distractors[1]);
        let mut triplets = Vec::new();
        let root_bx = self.random_box(rng, None).expect("box range fits the unit square");
        let root_cls = rng.gen_range(0..self.spec.classes);
        entities.push(self.entity(root_cls, root_bx));
        let mut failures = 0;
        while entities.len() < target && failures < 4 {
            let p = zipf.sample(rng);
            match self.grow(rng, &mut entities, p) {
                Some(t) => triplets.push(t),
                None => failures += 1,
            }
        }
        let [dlo, dhi] = self.spec.distractors;
        for _ in 0..rng.gen_range(dlo..=dhi) {
            let bx = self.random_box(rng, None).expect("box range fits the unit square");
            let cls = rng.gen_range(0..self.spec.classes);
            entities.push(self.entity(cls, bx));
        }
        let size = self.spec.image_size;
        SceneRecord { image_size: [size, size], entities, triplets }
    }
}

/// Generates both splits deterministically from `spec.seed`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rules = spec.rules(&mut rng)?;
    let held_out = choose_held_out(&rules, spec.zero_shot_fraction, &mut rng);
    let probs = zipf_probabilities(spec.predicates, spec.zipf_exponent);
    let zipf = WeightedIndex::new(&probs).map_err(|e| HarnessError::Generation(e.to_string()))?;

    let train_builder = SceneBuilder { spec, rules: &rules, held_out: Some(&held_out) };
    let test_builder = SceneBuilder { spec, rules: &rules, held_out: None };
    let train: Vec<SceneRecord> = (0..spec.train_scenes).map(|_| train_builder.scene(&mut rng, &zipf)).collect();
    let test: Vec<SceneRecord> = (0..spec.test_scenes).map(|_| test_builder.scene(&mut rng, &zipf)).collect();
    if spec.train_scenes > 0 && train.iter().all(|s| s.triplets.is_empty()) {
        return Err(HarnessError::Generation("rules admit no relation in any training scene".into()));
    }

    let priors = smoothed_priors(&train, spec.predicates);
    let mut seen = BTreeSet::new();
    for s in &train {
        for t in &s.triplets {
            seen.insert([s.entities[t[0]].class, t[1], s.entities[t[2]].class]);
        }
    }
    let seen_triples: Vec<[usize; 3]> = seen.into_iter().collect();
    Ok(Dataset {
        train: SplitFile { scenes: train, priors: priors.clone(), seen_triples: seen_triples.clone() },
        test: SplitFile { scenes: test, priors, seen_triples },
    })
}
