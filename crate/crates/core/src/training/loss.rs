use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w_focal: f64,
    pub w_dice: f64,
    pub gamma: f64,
    /// Weight of the positive class; negatives get `1 - alpha`.
    pub alpha: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_focal: 1.0,
            w_dice: 1.0,
            gamma: 2.0,
            alpha: 0.25,
            dice_eps: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "loss_config";
        ensure!(
            self.w_focal >= 0.0 && self.w_dice >= 0.0,
            OP,
            "loss weights must be non-negative"
        );
        ensure!(
            self.w_focal + self.w_dice > 0.0,
            OP,
            "at least one loss weight must be positive"
        );
        ensure!(self.gamma >= 0.0, OP, "gamma must be non-negative");
        ensure!(
            (0.0..=1.0).contains(&self.alpha),
            OP,
            "alpha must lie in [0, 1]"
        );
        ensure!(self.dice_eps > 0.0, OP, "dice_eps must be positive");
        Ok(())
    }
}

fn check_target(g: &Graph, probs: Var, target: &Tensor, op: &'static str) -> Result<()> {
    ensure!(
        g.shape(probs) == target.shape(),
        op,
        "prediction shape {:?} differs from target {:?}",
        g.shape(probs),
        target.shape()
    );
    Ok(())
}

/// Mean over pixels of `-alpha_t (1 - p_t)^gamma log p_t`.
pub fn focal_loss(
    g: &mut Graph,
    probs: Var,
    target: &Tensor,
    gamma: f64,
    alpha: f64,
) -> Result<Var> {
    check_target(g, probs, target, "focal_loss")?;
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    // p_t = t p + (1 - t)(1 - p) = (2t - 1) p + (1 - t)
    let slope = Tensor::new(
        target.shape(),
        target.data().iter().map(|t| 2.0 * t - 1.0).collect(),
    )?;
    let offset = Tensor::new(
        target.shape(),
        target.data().iter().map(|t| 1.0 - t).collect(),
    )?;
    let weight = Tensor::new(
        target.shape(),
        target
            .data()
            .iter()
            .map(|t| -(alpha * t + (1.0 - alpha) * (1.0 - t)))
            .collect(),
    )?;
    let (slope, offset, weight) = (g.constant(slope), g.constant(offset), g.constant(weight));
    let scaled = g.mul(p, slope)?;
    let pt = g.add(scaled, offset)?;
    let log_pt = g.log(pt)?;
    let miss = g.affine(pt, -1.0, 1.0)?;
    let modulator = g.pow(miss, gamma)?;
    let term = g.mul(modulator, log_pt)?;
    let weighted = g.mul(term, weight)?;
    g.mean(weighted)
}

/// Batch mean of per-image `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
pub fn dice_loss(g: &mut Graph, probs: Var, target: &Tensor, eps: f64) -> Result<Var> {
    check_target(g, probs, target, "dice_loss")?;
    let n = target.shape().first().copied().unwrap_or(1).max(1);
    let t = g.constant(target.clone());
    let overlap = g.mul(probs, t)?;
    let inter = g.sum_per_sample(overlap)?;
    let psum = g.sum_per_sample(probs)?;
    let per_image = target.numel() / n;
    let tsum: Vec<f64> = target
        .data()
        .chunks(per_image)
        .map(|c| c.iter().sum::<f64>() + eps)
        .collect();
    let tsum = g.constant(Tensor::new(&[n], tsum)?);
    let num = g.affine(inter, 2.0, eps)?;
    let den = g.add(psum, tsum)?;
    let ratio = g.div(num, den)?;
    let loss = g.affine(ratio, -1.0, 1.0)?;
    g.mean(loss)
}

/// `w_focal * focal(sigmoid(logits)) + w_dice * dice(sigmoid(logits))`.
pub fn combined_loss(g: &mut Graph, logits: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let probs = g.sigmoid(logits)?;
    let focal = focal_loss(g, probs, target, cfg.gamma, cfg.alpha)?;
    let dice = dice_loss(g, probs, target, cfg.dice_eps)?;
    match (cfg.w_focal, cfg.w_dice) {
        (wf, 0.0) => g.affine(focal, wf, 0.0),
        (0.0, wd) => g.affine(dice, wd, 0.0),
        (wf, wd) => {
            let f = g.affine(focal, wf, 0.0)?;
            let d = g.affine(dice, wd, 0.0)?;
            g.add(f, d)
        }
    }
}

/// Scalar value of [`combined_loss`] without keeping a graph around.
pub fn combined_loss_value(logits: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = combined_loss(&mut g, l, target, cfg)?;
    g.value(loss).item()
}
