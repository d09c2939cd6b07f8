use serde::{Deserialize, Serialize};

use crate::datasets::Mask;
use crate::error::{ensure, Result};
use crate::numerics::Tensor;

/// Per-image quantile threshold; nearest-rank, strictly-greater is hazard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdPolicy {
    pub quantile: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self { quantile: 0.95 }
    }
}

impl ThresholdPolicy {
    pub const RANK_CONVENTION: &'static str = "nearest-rank";
    pub const COMPARISON: &'static str = "strictly-greater";

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.quantile > 0.0 && self.quantile < 1.0,
            "threshold_policy",
            "quantile must lie in (0, 1), got {}",
            self.quantile
        );
        Ok(())
    }
}

/// 1-based rank `ceil(q n)`. Products within 1e-9 of an integer are taken as
/// that integer so that e.g. `0.95 * 100` lands on 95.
pub fn nearest_rank_index(n: usize, q: f64) -> usize {
    let x = q * n as f64;
    let r = x.round();
    let rank = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (rank as usize).clamp(1, n)
}

pub fn nearest_rank_percentile(values: &[f64], q: f64) -> Result<f64> {
    const OP: &str = "nearest_rank_percentile";
    ensure!(!values.is_empty(), OP, "no values");
    ensure!(q > 0.0 && q < 1.0, OP, "q must lie in (0, 1), got {q}");
    ensure!(
        values.iter().all(|v| v.is_finite()),
        OP,
        "values must be finite"
    );
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank_index(values.len(), q) - 1])
}

/// Binary mask of one image's scores (`[1, 1, H, W]` or `[H, W]`).
pub fn threshold_mask(scores: &Tensor, policy: &ThresholdPolicy) -> Result<Mask> {
    let (h, w) = match *scores.shape() {
        [1, 1, h, w] | [h, w] => (h, w),
        _ => {
            return Err(crate::Error::contract(
                "threshold_mask",
                format!("expected [1,1,H,W] or [H,W], got {:?}", scores.shape()),
            ))
        }
    };
    let t = nearest_rank_percentile(scores.data(), policy.quantile)?;
    Mask::new(
        h,
        w,
        scores.data().iter().map(|&v| u8::from(v > t)).collect(),
    )
}

/// Independent per-image masks of an `[N, 1, H, W]` score batch.
pub fn threshold_batch(scores: &Tensor, policy: &ThresholdPolicy) -> Result<Vec<Mask>> {
    let (_, c, h, w) = scores.dims4("threshold_batch")?;
    ensure!(
        c == 1,
        "threshold_batch",
        "expected one score channel, got {c}"
    );
    scores
        .data()
        .chunks(h * w)
        .map(|img| threshold_mask(&Tensor::new(&[h, w], img.to_vec())?, policy))
        .collect()
}
