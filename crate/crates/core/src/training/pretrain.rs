use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{AdamWConfig, AdamWState};
use super::loss::{combined_loss, combined_loss_value, LossConfig};
use crate::datasets::{stack_images, stack_masks, SegmentationSample};
use crate::error::{ensure, Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::unet::{BnMode, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub max_epochs: usize,
    /// Epochs without a strict validation improvement before stopping.
    pub patience: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            patience: 5,
        }
    }
}

/// Tracks the best validation loss seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub config: EarlyStopConfig,
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopState {
    pub fn new(config: EarlyStopConfig) -> Self {
        Self {
            config,
            best_val_loss: f64::INFINITY,
            best_epoch: None,
            epochs_since_improvement: 0,
        }
    }

    /// Records the validation loss of 1-based `epoch`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        let improved = val_loss < self.best_val_loss;
        if improved {
            self.best_val_loss = val_loss;
            self.best_epoch = Some(epoch);
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        let stop = self.epochs_since_improvement >= self.config.patience
            || epoch >= self.config.max_epochs;
        StopDecision { improved, stop }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub loss: LossConfig,
    pub optim: AdamWConfig,
    pub stop: EarlyStopConfig,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            optim: AdamWConfig::default(),
            stop: EarlyStopConfig::default(),
            batch_size: 8,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optim.validate()?;
        ensure!(
            self.batch_size >= 1,
            "pretrain_config",
            "batch_size must be positive"
        );
        ensure!(
            self.stop.max_epochs >= 1,
            "pretrain_config",
            "max_epochs must be positive"
        );
        ensure!(
            self.stop.patience >= 1,
            "pretrain_config",
            "patience must be positive"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Train-mode loss of the initial model over the training set.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{:.3}\n",
                r.epoch, r.train_loss, r.val_loss, r.seconds
            ));
        }
        out
    }
}

fn batch_tensors(model: &Model, samples: &[&SegmentationSample]) -> Result<(Tensor, Tensor)> {
    Ok((
        stack_images(samples, model.config().in_channels)?,
        stack_masks(samples)?,
    ))
}

/// Image-weighted mean loss over `samples` in inference batches.
pub fn dataset_loss(
    model: &Model,
    samples: &[SegmentationSample],
    cfg: &LossConfig,
    mode: BnMode,
    batch: usize,
) -> Result<f64> {
    ensure!(!samples.is_empty(), "dataset_loss", "empty dataset");
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SegmentationSample> = chunk.iter().collect();
        let (x, y) = batch_tensors(model, &refs)?;
        let logits = model.forward(&x, mode)?.logits;
        total += combined_loss_value(&logits, &y, cfg)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Loss of the best constant prediction (one probability for every pixel),
/// found by a fine grid search over logits.
pub fn constant_prediction_loss(samples: &[SegmentationSample], cfg: &LossConfig) -> Result<f64> {
    ensure!(
        !samples.is_empty(),
        "constant_prediction_loss",
        "empty dataset"
    );
    let refs: Vec<&SegmentationSample> = samples.iter().collect();
    let y = stack_masks(&refs)?;
    let mut best = f64::INFINITY;
    for i in 0..=400 {
        let z = -10.0 + 20.0 * i as f64 / 400.0;
        best = best.min(combined_loss_value(&Tensor::full(y.shape(), z), &y, cfg)?);
    }
    Ok(best)
}

fn as_training_error(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Contract { .. } => e,
        other => Error::Training {
            epoch,
            batch,
            detail: other.to_string(),
        },
    }
}

/// Minibatch AdamW training with early stopping on validation loss. Returns
/// the model of the best validation epoch.
pub fn pretrain(
    model: &Model,
    train: &[SegmentationSample],
    val: &[SegmentationSample],
    cfg: &PretrainConfig,
) -> Result<(Model, History)> {
    const OP: &str = "pretrain";
    cfg.validate()?;
    ensure!(!train.is_empty(), OP, "training set is empty");
    ensure!(!val.is_empty(), OP, "validation set is empty");
    let train_ids: BTreeSet<u64> = train.iter().map(|s| s.sample_id).collect();
    ensure!(
        train_ids.len() == train.len(),
        OP,
        "duplicate sample ids in the training set"
    );
    if let Some(s) = val.iter().find(|s| train_ids.contains(&s.sample_id)) {
        return Err(Error::contract(
            OP,
            format!("sample id {} is in both train and val", s.sample_id),
        ));
    }

    let mut model = model.clone();
    let decay: Vec<bool> = model.trainable().iter().map(|p| p.decay).collect();
    let mut values: Vec<Tensor> = model.trainable().into_iter().map(|p| p.value).collect();
    let mut optim = AdamWState::new(cfg.optim.clone(), &values)?;
    let mut stopper = EarlyStopState::new(cfg.stop.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History {
        initial_train_loss: dataset_loss(&model, train, &cfg.loss, BnMode::Train, cfg.batch_size)?,
        ..History::default()
    };
    let mut best = model.clone();

    for epoch in 1..=cfg.stop.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let wrap = as_training_error(epoch, b + 1);
            let refs: Vec<&SegmentationSample> = idx.iter().map(|&i| &train[i]).collect();
            let (x, y) = batch_tensors(&model, &refs)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let fwd = model
                .forward_on(&mut g, xv, BnMode::Train, true, None)
                .map_err(&wrap)?;
            let loss = combined_loss(&mut g, fwd.logits, &y, &cfg.loss).map_err(&wrap)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: b + 1,
                    detail: format!("loss is {value}"),
                });
            }
            let grads = g.backward(loss).map_err(&wrap)?;
            let grads: Vec<Tensor> = fwd
                .bindings
                .iter()
                .map(|&v| grads.get_or_zeros(v))
                .collect();
            optim.step(&mut values, &grads, &decay).map_err(&wrap)?;
            model.set_bn_states(fwd.bn).map_err(&wrap)?;
            model.set_trainable(values.clone()).map_err(&wrap)?;
            loss_sum += value * idx.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = dataset_loss(&model, val, &cfg.loss, BnMode::Eval, cfg.batch_size)
            .map_err(as_training_error(epoch, 0))?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: 0,
                detail: format!("validation loss is {val_loss}"),
            });
        }
        let decision = stopper.observe(epoch, val_loss);
        if decision.improved {
            best = model.clone();
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        if decision.stop {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch.expect("at least one epoch ran");
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopper_fires_after_patience_non_improving_epochs() {
        let mut s = EarlyStopState::new(EarlyStopConfig {
            max_epochs: 50,
            patience: 1,
        });
        assert_eq!(
            s.observe(1, 1.0),
            StopDecision {
                improved: true,
                stop: false
            }
        );
        assert_eq!(
            s.observe(2, 1.5),
            StopDecision {
                improved: false,
                stop: true
            }
        );
        assert_eq!(s.best_epoch, Some(1));

        let mut s = EarlyStopState::new(EarlyStopConfig {
            max_epochs: 50,
            patience: 3,
        });
        for (e, v) in [(1, 3.0), (2, 2.0), (3, 2.0), (4, 2.5)] {
            assert!(!s.observe(e, v).stop);
        }
        assert_eq!(s.epochs_since_improvement, 2);
        assert!(!s.observe(5, 1.0).stop);
        assert_eq!(s.best_epoch, Some(5));
        assert!(!s.observe(6, 9.0).stop);
    }

    #[test]
    fn stopper_fires_at_max_epochs() {
        let mut s = EarlyStopState::new(EarlyStopConfig {
            max_epochs: 3,
            patience: 5,
        });
        assert!(!s.observe(1, 3.0).stop);
        assert!(!s.observe(2, 2.0).stop);
        assert!(s.observe(3, 1.0).stop);
    }

    #[test]
    fn stopper_never_prefers_a_worse_epoch() {
        let mut s = EarlyStopState::new(EarlyStopConfig {
            max_epochs: 100,
            patience: 100,
        });
        let losses = [0.9, 0.7, 0.8, 0.7, 0.65, 0.66, 0.5, 0.5, 0.9];
        for (e, &v) in losses.iter().enumerate() {
            s.observe(e + 1, v);
            assert!(losses[..=e].iter().all(|&l| s.best_val_loss <= l));
        }
        assert_eq!(s.best_epoch, Some(7));
    }

    #[test]
    fn history_csv_layout() {
        let h = History {
            initial_train_loss: 1.0,
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                seconds: 1.23456,
            }],
            best_epoch: 1,
        };
        assert_eq!(
            h.to_csv(),
            "epoch,train_loss,val_loss,seconds\n1,0.5,0.25,1.235\n"
        );
    }
}
