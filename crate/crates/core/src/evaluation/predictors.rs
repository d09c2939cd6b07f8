//! Score-map producers: trained models and the random reference baselines.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptation::{threshold_mask, ThresholdPolicy};
use crate::datasets::{stack_images, Mask, SegmentationSample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::unet::{Model, UNetConfig};

/// Images scored per forward pass.
const SCORE_BATCH: usize = 16;

pub trait Predictor: Send + Sync {
    fn name(&self) -> &str;

    /// One `[1, 1, H, W]` score map per sample; higher means hazard.
    fn scores(&self, samples: &[SegmentationSample]) -> Result<Vec<Tensor>>;

    fn masks(&self, samples: &[SegmentationSample], policy: &ThresholdPolicy) -> Result<Vec<Mask>> {
        self.scores(samples)?
            .iter()
            .map(|s| threshold_mask(s, policy))
            .collect()
    }
}

fn single_map(h: usize, w: usize, data: Vec<f64>) -> Result<Tensor> {
    Tensor::new(&[1, 1, h, w], data)
}

/// Eval-mode sigmoid probabilities of a network.
pub struct ModelPredictor {
    name: String,
    model: Model,
}

impl ModelPredictor {
    pub fn new(name: impl Into<String>, model: Model) -> Self {
        Self {
            name: name.into(),
            model,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

impl Predictor for ModelPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn scores(&self, samples: &[SegmentationSample]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(SCORE_BATCH) {
            let refs: Vec<&SegmentationSample> = chunk.iter().collect();
            let x = stack_images(&refs, self.model.config().in_channels)?;
            let probs = self.model.predict_probs(&x)?;
            let (h, w) = (probs.shape()[2], probs.shape()[3]);
            for img in probs.data().chunks(h * w) {
                out.push(single_map(h, w, img.to_vec())?);
            }
        }
        Ok(out)
    }
}

/// I.i.d. uniform scores; each image's stream depends only on the seed and
/// its sample id.
pub struct UniformNoise {
    seed: u64,
}

impl UniformNoise {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl Predictor for UniformNoise {
    fn name(&self) -> &str {
        "uniform-noise"
    }

    fn scores(&self, samples: &[SegmentationSample]) -> Result<Vec<Tensor>> {
        samples
            .iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(s.sample_id);
                let (h, w) = (s.mask.height(), s.mask.width());
                single_map(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect())
            })
            .collect()
    }
}

/// Constant scores, which threshold to an all-background mask.
pub struct AllBackground;

impl Predictor for AllBackground {
    fn name(&self) -> &str {
        "all-background"
    }

    fn scores(&self, samples: &[SegmentationSample]) -> Result<Vec<Tensor>> {
        samples
            .iter()
            .map(|s| single_map(s.mask.height(), s.mask.width(), vec![0.0; s.mask.len()]))
            .collect()
    }
}

/// Builds a baseline predictor for a network configuration and seed.
pub trait BaselineFactory: Send + Sync {
    fn name(&self) -> &'static str;

    fn build(&self, unet: &UNetConfig, seed: u64) -> Result<Box<dyn Predictor>>;
}

struct UniformNoiseFactory;

impl BaselineFactory for UniformNoiseFactory {
    fn name(&self) -> &'static str {
        "uniform-noise"
    }

    fn build(&self, _unet: &UNetConfig, seed: u64) -> Result<Box<dyn Predictor>> {
        Ok(Box::new(UniformNoise::new(seed)))
    }
}

struct RandomInitFactory;

impl BaselineFactory for RandomInitFactory {
    fn name(&self) -> &'static str {
        "random-init-unet"
    }

    /// Untrained network of the same shape, initialized from `seed`.
    fn build(&self, unet: &UNetConfig, seed: u64) -> Result<Box<dyn Predictor>> {
        let model = Model::build(&UNetConfig {
            seed,
            ..unet.clone()
        })?;
        Ok(Box::new(ModelPredictor::new("random-init-unet", model)))
    }
}

struct AllBackgroundFactory;

impl BaselineFactory for AllBackgroundFactory {
    fn name(&self) -> &'static str {
        "all-background"
    }

    fn build(&self, _unet: &UNetConfig, _seed: u64) -> Result<Box<dyn Predictor>> {
        Ok(Box::new(AllBackground))
    }
}

#[derive(Clone, Default)]
pub struct BaselineRegistry {
    entries: BTreeMap<&'static str, Arc<dyn BaselineFactory>>,
}

impl BaselineRegistry {
    /// The two reference baselines significance is tested against.
    pub const REFERENCE: [&'static str; 2] = ["uniform-noise", "random-init-unet"];

    pub fn with_defaults() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(UniformNoiseFactory));
        r.register(Arc::new(RandomInitFactory));
        r.register(Arc::new(AllBackgroundFactory));
        r
    }

    pub fn register(&mut self, factory: Arc<dyn BaselineFactory>) {
        self.entries.insert(factory.name(), factory);
    }

    pub fn build(&self, name: &str, unet: &UNetConfig, seed: u64) -> Result<Box<dyn Predictor>> {
        self.entries
            .get(name)
            .ok_or_else(|| {
                Error::contract("baseline_registry", format!("no baseline named {name:?}"))
            })?
            .build(unet, seed)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

/// Thresholded masks of a named baseline.
pub fn baseline_masks(
    name: &str,
    samples: &[SegmentationSample],
    unet: &UNetConfig,
    seed: u64,
    policy: &ThresholdPolicy,
) -> Result<Vec<Mask>> {
    BaselineRegistry::with_defaults()
        .build(name, unet, seed)?
        .masks(samples, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate, GeneratorConfig, TaskKind};

    fn samples() -> Vec<SegmentationSample> {
        generate(&GeneratorConfig::new(TaskKind::Flood, 4, 2)).unwrap()
    }

    #[test]
    fn uniform_noise_flags_the_nearest_rank_complement() {
        let masks = baseline_masks(
            "uniform-noise",
            &samples(),
            &UNetConfig::default(),
            5,
            &ThresholdPolicy::default(),
        )
        .unwrap();
        for m in masks {
            assert_eq!(m.positives(), 1024 - 973);
        }
    }

    #[test]
    fn baselines_are_seeded() {
        let s = samples();
        let cfg = UNetConfig::micro(crate::unet::BackboneVariant::Residual, 1, 4, 0);
        let p = ThresholdPolicy::default();
        for name in BaselineRegistry::REFERENCE {
            let a = baseline_masks(name, &s, &cfg, 9, &p).unwrap();
            assert_eq!(a, baseline_masks(name, &s, &cfg, 9, &p).unwrap());
            assert_ne!(a, baseline_masks(name, &s, &cfg, 10, &p).unwrap());
        }
    }

    #[test]
    fn uniform_noise_depends_on_sample_id_not_position() {
        let s = samples();
        let noise = UniformNoise::new(1);
        let forward = noise.scores(&s).unwrap();
        let mut reversed = s.clone();
        reversed.reverse();
        let backward = noise.scores(&reversed).unwrap();
        assert!(forward[0].bit_eq(&backward[3]));
    }

    #[test]
    fn all_background_predicts_nothing() {
        let masks = AllBackground
            .masks(&samples(), &ThresholdPolicy::default())
            .unwrap();
        assert!(masks.iter().all(|m| m.positives() == 0));
        assert!(BaselineRegistry::with_defaults()
            .build("oracle", &UNetConfig::default(), 0)
            .is_err());
    }
}
