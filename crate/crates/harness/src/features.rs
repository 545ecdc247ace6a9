//! Deterministic per-scene feature volumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repsgg_core::features::synthesize_features;
use repsgg_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::{SceneSample, Split};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub seed: u64,
    pub noise_std: f64,
    pub signature_std: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { seed: 7, noise_std: 0.1, signature_std: 1.0 }
    }
}

impl FeatureConfig {
    /// Class signatures `[C, d]`, fixed by the seed.
    pub fn class_signatures(&self, classes: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Tensor::randn(vec![classes, d], self.signature_std, &mut rng)
    }

    /// `V [5, H, W, d]` for scene `index` of `split`; noise comes from a
    /// stream unique to the scene.
    pub fn scene_features(
        &self,
        signatures: &Tensor,
        scene: &SceneSample,
        split: Split,
        index: usize,
    ) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let split_id: u64 = match split {
            Split::Train => 1,
            Split::Test => 2,
        };
        rng.set_stream((split_id << 40) | index as u64);
        Ok(synthesize_features(&scene.entities, scene.image_size, signatures, self.noise_std, &mut rng)?)
    }

    pub fn split_features(&self, signatures: &Tensor, scenes: &[SceneSample], split: Split) -> Result<Vec<Tensor>> {
        scenes.iter().enumerate().map(|(i, s)| self.scene_features(signatures, s, split, i)).collect()
    }
}
