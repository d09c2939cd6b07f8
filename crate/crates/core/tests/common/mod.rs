#![allow(dead_code)]

use std::path::Path;

use hazlab::datasets::{GeneratorConfig, TaskKind};
use hazlab::harness::ExperimentConfig;
use hazlab::training::EarlyStopConfig;
use hazlab::unet::{BackboneVariant, UNetConfig};

/// A run that finishes in seconds: one seed, one variant, small sets.
pub fn tiny_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        pretask: GeneratorConfig::new(TaskKind::Buildings, 40, 0),
        validation_size: 8,
        variants: vec![UNetConfig::micro(BackboneVariant::Residual, 3, 4, 0)],
        early_stop: EarlyStopConfig {
            max_epochs: 2,
            patience: 5,
        },
        k_sweep: vec![0, 1],
        n_seeds: 1,
        unlabeled_pool_size: 4,
        eval_set_size: 16,
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
