use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::ThresholdPolicy;
use crate::datasets::{GeneratorConfig, TaskKind};
use crate::error::{ensure, Error, Result};
use crate::evaluation::RankTest;
use crate::training::{AdamWConfig, EarlyStopConfig, LossConfig, PretrainConfig};
use crate::unet::{BackboneVariant, UNetConfig};

/// Declarative description of a full transfer experiment.
///
/// Generator and network seeds in the nested configs are offsets: every run
/// seed derives its own data, initialization, shuffle and selection seeds
/// from them (see [`SeedPlan`](super::SeedPlan)).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Pre-task images; the last `validation_size` are held out.
    pub pretask: GeneratorConfig,
    pub validation_size: usize,
    /// One generator per hazard task. `n_samples` is ignored: each seed draws
    /// `eval_set_size + unlabeled_pool_size` images.
    pub downstream: Vec<GeneratorConfig>,
    pub variants: Vec<UNetConfig>,
    pub loss: LossConfig,
    pub optimizer: AdamWConfig,
    pub early_stop: EarlyStopConfig,
    pub batch_size: usize,
    pub k_sweep: Vec<usize>,
    pub n_seeds: usize,
    /// First run seed; seeds are `base_seed .. base_seed + n_seeds`.
    pub base_seed: u64,
    pub unlabeled_pool_size: usize,
    pub eval_set_size: usize,
    pub threshold: ThresholdPolicy,
    pub rank_test: RankTest,
    /// Images per forward pass while collecting adaptation moments.
    pub adaptation_chunk_size: Option<usize>,
    pub output_dir: PathBuf,
    /// Worker threads across independent jobs.
    pub threads: usize,
    pub save_checkpoints: bool,
    /// Per-image metric CSVs for every (seed, task, variant, k).
    pub save_per_image: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pretask: GeneratorConfig::new(TaskKind::Buildings, 512, 0),
            validation_size: 64,
            downstream: TaskKind::DOWNSTREAM
                .iter()
                .map(|&k| GeneratorConfig::new(k, 128, 0))
                .collect(),
            variants: BackboneVariant::ALL
                .iter()
                .map(|&v| UNetConfig::micro(v, 3, 8, 0))
                .collect(),
            loss: LossConfig::default(),
            optimizer: AdamWConfig::default(),
            early_stop: EarlyStopConfig::default(),
            batch_size: 8,
            k_sweep: vec![0, 1, 5, 10, 50],
            n_seeds: 5,
            base_seed: 0,
            unlabeled_pool_size: 64,
            eval_set_size: 64,
            threshold: ThresholdPolicy::default(),
            rank_test: RankTest::SignedRank,
            adaptation_chunk_size: None,
            output_dir: PathBuf::from("runs/default"),
            threads: 1,
            save_checkpoints: true,
            save_per_image: true,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file. A run manifest is accepted as well, which makes
    /// every finished run reproducible from its manifest alone.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json_err = |source| Error::Json {
            context: path.display().to_string(),
            source,
        };
        let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
        let value = match value.get("config") {
            Some(inner) if value.get("manifest_version").is_some() => inner.clone(),
            _ => value,
        };
        let cfg: Self = serde_json::from_value(value).map_err(json_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64)
            .map(|i| self.base_seed.wrapping_add(i))
            .collect()
    }

    pub fn pretrain_config(&self, shuffle_seed: u64) -> PretrainConfig {
        PretrainConfig {
            loss: self.loss.clone(),
            optim: self.optimizer.clone(),
            stop: self.early_stop.clone(),
            batch_size: self.batch_size,
            seed: shuffle_seed,
        }
    }

    pub fn max_k(&self) -> usize {
        self.k_sweep.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "experiment_config";
        self.pretask.validate()?;
        ensure!(
            self.validation_size >= 1 && self.validation_size < self.pretask.n_samples,
            OP,
            "validation_size {} must lie in [1, {})",
            self.validation_size,
            self.pretask.n_samples
        );
        ensure!(!self.downstream.is_empty(), OP, "no downstream tasks");
        let mut kinds = BTreeSet::new();
        for d in &self.downstream {
            ensure!(
                d.kind != self.pretask.kind,
                OP,
                "downstream task {} equals the pre-task",
                d.kind
            );
            ensure!(
                kinds.insert(d.kind),
                OP,
                "downstream task {} listed twice",
                d.kind
            );
            ensure!(
                d.size == self.pretask.size,
                OP,
                "{} images are {} px, pre-task images {}",
                d.kind,
                d.size,
                self.pretask.size
            );
            GeneratorConfig {
                n_samples: 1,
                ..d.clone()
            }
            .validate()?;
        }
        ensure!(!self.variants.is_empty(), OP, "no backbone variants");
        let mut names = BTreeSet::new();
        for v in &self.variants {
            v.validate()?;
            ensure!(
                names.insert(v.variant),
                OP,
                "variant {} listed twice",
                v.variant
            );
            ensure!(
                v.in_channels == self.pretask.bands(),
                OP,
                "{} expects {} input channels, pre-task images have {}",
                v.variant,
                v.in_channels,
                self.pretask.bands()
            );
            ensure!(
                self.pretask.size.is_multiple_of(1 << v.depth),
                OP,
                "image size {} is not divisible by 2^{} for {}",
                self.pretask.size,
                v.depth,
                v.variant
            );
        }
        self.pretrain_config(0).validate()?;
        ensure!(
            self.k_sweep.first() == Some(&0),
            OP,
            "k_sweep must start at 0, got {:?}",
            self.k_sweep
        );
        ensure!(
            self.k_sweep.windows(2).all(|w| w[0] < w[1]),
            OP,
            "k_sweep must be strictly ascending, got {:?}",
            self.k_sweep
        );
        ensure!(
            self.max_k() <= self.unlabeled_pool_size,
            OP,
            "largest k {} exceeds the unlabeled pool of {}",
            self.max_k(),
            self.unlabeled_pool_size
        );
        ensure!(self.n_seeds >= 1, OP, "n_seeds must be at least 1");
        ensure!(
            self.eval_set_size >= 1,
            OP,
            "eval_set_size must be at least 1"
        );
        self.threshold.validate()?;
        if let Some(c) = self.adaptation_chunk_size {
            ensure!(c >= 1, OP, "adaptation_chunk_size must be positive");
        }
        ensure!(self.threads >= 1, OP, "threads must be at least 1");
        Ok(())
    }
}
