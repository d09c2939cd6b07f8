//! Unsupervised batch-norm statistics adaptation and per-image thresholding.

mod threshold;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::Tensor;
use crate::unet::{BnMode, Model};

pub use threshold::{
    nearest_rank_index, nearest_rank_percentile, threshold_batch, threshold_mask, ThresholdPolicy,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    /// Running statistics are replaced by exact moments over the target images.
    #[default]
    ResetRecompute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub k: usize,
    pub image_selection_seed: u64,
    pub mode: AdaptationMode,
    /// Images per forward pass while collecting moments; `None` processes all
    /// `k` images in one pass.
    pub chunk_size: Option<usize>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            k: 0,
            image_selection_seed: 0,
            mode: AdaptationMode::ResetRecompute,
            chunk_size: None,
        }
    }
}

/// Indices of `k` pool entries chosen uniformly without replacement.
pub fn select_indices(pool_size: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    ensure!(
        k <= pool_size,
        "select_images",
        "k = {k} exceeds the unlabeled pool of {pool_size}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, pool_size, k).into_vec())
}

/// Streaming per-channel `(count, mean, M2)` accumulator with Chan's merge.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMoments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ChannelMoments {
    pub fn new(channels: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    /// Adds an `[N, C, H, W]` activation block (two-pass within the block).
    pub fn push(&mut self, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.dims4("channel_moments")?;
        ensure!(
            c == self.mean.len(),
            "channel_moments",
            "expected {} channels, got {c}",
            self.mean.len()
        );
        let hw = h * w;
        let nb = (n * hw) as f64;
        let d = x.data();
        for ch in 0..c {
            let values =
                || (0..n).flat_map(move |i| d[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter());
            let mb = values().sum::<f64>() / nb;
            let m2b: f64 = values().map(|v| (v - mb) * (v - mb)).sum();
            let total = self.count + nb;
            let delta = mb - self.mean[ch];
            self.mean[ch] += delta * nb / total;
            self.m2[ch] += m2b + delta * delta * self.count * nb / total;
        }
        self.count += nb;
        Ok(())
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Biased (population) variance.
    pub fn variance(&self) -> Vec<f64> {
        self.m2.iter().map(|m| m / self.count).collect()
    }
}

/// Replaces every batch-norm layer's running statistics by the exact moments
/// of its input over `images` (each `[C, H, W]`), earlier layers already
/// adapted when later layers are measured. Labels never enter.
pub fn adapt_bn(model: &Model, images: &[Tensor], cfg: &AdaptationConfig) -> Result<Model> {
    const OP: &str = "adapt_bn";
    ensure!(
        images.len() == cfg.k,
        OP,
        "config says k = {} but {} images were given",
        cfg.k,
        images.len()
    );
    if images.is_empty() {
        return Ok(model.clone());
    }
    let shape = images[0].shape();
    ensure!(
        images.iter().all(|t| t.shape() == shape),
        OP,
        "target images have inconsistent shapes"
    );
    let chunk = cfg.chunk_size.unwrap_or(images.len());
    ensure!(chunk >= 1, OP, "chunk_size must be positive");
    if chunk >= images.len() {
        let x = Tensor::stack(images)?;
        let out = model.forward(&x, BnMode::Recompute)?;
        return model.with_bn_states(out.bn);
    }
    let batches: Vec<Tensor> = images
        .chunks(chunk)
        .map(Tensor::stack)
        .collect::<Result<_>>()?;
    let mut adapted = model.clone();
    for layer in 0..model.bn_states().len() {
        let mut acc = ChannelMoments::new(model.bn_states()[layer].channels);
        for x in &batches {
            let mut failure = None;
            let mut observe = |i: usize, input: &Tensor| {
                if i == layer && failure.is_none() {
                    failure = acc.push(input).err();
                }
            };
            adapted.forward_observed(x, BnMode::Eval, Some(&mut observe))?;
            if let Some(e) = failure {
                return Err(e);
            }
        }
        let mut states = adapted.bn_states().to_vec();
        states[layer] = states[layer].with_statistics(acc.mean().to_vec(), acc.variance());
        adapted.set_bn_states(states)?;
    }
    Ok(adapted)
}

/// Seeded selection of `cfg.k` images from `pool` followed by [`adapt_bn`].
pub fn adapt_from_pool(model: &Model, pool: &[Tensor], cfg: &AdaptationConfig) -> Result<Model> {
    let chosen: Vec<Tensor> = select_indices(pool.len(), cfg.k, cfg.image_selection_seed)?
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    adapt_bn(model, &chosen, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            shape,
            (0..shape.iter().product())
                .map(|_| rng.random_range(-1.0..2.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn streaming_moments_are_batching_independent() {
        let x = random(&[7, 3, 4, 4], 1);
        let mut whole = ChannelMoments::new(3);
        whole.push(&x).unwrap();
        let parts = x.unstack();
        let mut pieces = ChannelMoments::new(3);
        for group in parts.chunks(3) {
            pieces.push(&Tensor::stack(group).unwrap()).unwrap();
        }
        for c in 0..3 {
            assert!((whole.mean()[c] - pieces.mean()[c]).abs() < 1e-14);
            assert!((whole.variance()[c] - pieces.variance()[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn selection_is_seeded_and_bounded() {
        let a = select_indices(64, 10, 3).unwrap();
        assert_eq!(a, select_indices(64, 10, 3).unwrap());
        assert_ne!(a, select_indices(64, 10, 4).unwrap());
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        assert!(select_indices(5, 6, 0).is_err());
        assert!(select_indices(5, 0, 0).unwrap().is_empty());
    }
}
