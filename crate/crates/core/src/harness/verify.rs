//! Built-in verification suites behind the `gradcheck` and `selftest`
//! commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adaptation::{
    nearest_rank_index, nearest_rank_percentile, threshold_mask, ThresholdPolicy,
};
use crate::datasets::Mask;
use crate::error::Result;
use crate::evaluation::{
    average_ranks, confusion, metrics, wilcoxon_normal_approx, wilcoxon_one_tailed,
    ConfusionCounts, TestMethod,
};
use crate::layers::{se_gate, SeWeights};
use crate::numerics::{grad_check, GradCheckReport, Graph, Tensor, Var};
use crate::training::{combined_loss, dice_loss, focal_loss, AdamWConfig, AdamWState, LossConfig};
use crate::unet::{BackboneVariant, BnMode, Model, UNetConfig};

/// Largest accepted relative error of any gradient component.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckCase {
    pub name: String,
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped_at_kinks: usize,
}

impl GradCheckCase {
    fn from_report(name: &str, r: GradCheckReport) -> Self {
        Self {
            name: name.to_string(),
            max_relative_error: r.max_relative_error,
            checked: r.checked,
            skipped_at_kinks: r.skipped_at_kinks,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_relative_error < GRADCHECK_TOLERANCE
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Random-weighted sum, which turns any output into a scalar without the
/// cancellations of a plain sum.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(g.shape(y), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Case = (
    &'static str,
    Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
    Vec<Tensor>,
);

fn case(
    name: &'static str,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    inputs: Vec<Tensor>,
) -> Case {
    (name, Box::new(f), inputs)
}

fn primitive_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut r = |shape: &[usize], lo: f64, hi: f64| uniform(shape, lo, hi, &mut rng);
    let s = [2, 3, 4];
    let img = [2, 4, 6, 6];
    let target = Tensor::new(
        &[2, 1, 4, 4],
        (0..32)
            .map(|i| f64::from(u8::from(i % 5 == 0 || i % 7 == 1)))
            .collect(),
    )
    .expect("shape matches");
    let (t1, t2, t3) = (target.clone(), target.clone(), target);
    vec![
        case(
            "add",
            |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, 1)
            },
            vec![r(&s, -1.0, 1.0), r(&s, -1.0, 1.0)],
        ),
        case(
            "add_scalar_broadcast",
            |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, 1)
            },
            vec![r(&s, -1.0, 1.0), r(&[1], -1.0, 1.0)],
        ),
        case(
            "sub",
            |g, v| {
                let y = g.sub(v[0], v[1])?;
                project(g, y, 2)
            },
            vec![r(&s, -1.0, 1.0), r(&s, -1.0, 1.0)],
        ),
        case(
            "mul",
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, 3)
            },
            vec![r(&s, -1.0, 1.0), r(&s, -1.0, 1.0)],
        ),
        case(
            "div",
            |g, v| {
                let y = g.div(v[0], v[1])?;
                project(g, y, 4)
            },
            vec![r(&s, -1.0, 1.0), r(&s, 0.5, 2.0)],
        ),
        case(
            "neg",
            |g, v| {
                let y = g.neg(v[0])?;
                project(g, y, 5)
            },
            vec![r(&s, -1.0, 1.0)],
        ),
        case(
            "exp",
            |g, v| {
                let y = g.exp(v[0])?;
                project(g, y, 6)
            },
            vec![r(&s, -2.0, 2.0)],
        ),
        case(
            "log",
            |g, v| {
                let y = g.log(v[0])?;
                project(g, y, 7)
            },
            vec![r(&s, 0.2, 3.0)],
        ),
        case(
            "pow",
            |g, v| {
                let y = g.pow(v[0], 2.5)?;
                project(g, y, 8)
            },
            vec![r(&s, 0.2, 2.0)],
        ),
        case(
            "relu",
            |g, v| {
                let y = g.relu(v[0])?;
                project(g, y, 9)
            },
            vec![r(&s, -1.0, 1.0)],
        ),
        case(
            "sigmoid",
            |g, v| {
                let y = g.sigmoid(v[0])?;
                project(g, y, 10)
            },
            vec![r(&s, -4.0, 4.0)],
        ),
        case(
            "max_scalar",
            |g, v| {
                let y = g.max_scalar(v[0], 0.1)?;
                project(g, y, 11)
            },
            vec![r(&s, -1.0, 1.0)],
        ),
        case(
            "clamp",
            |g, v| {
                let y = g.clamp(v[0], -0.5, 0.5)?;
                project(g, y, 12)
            },
            vec![r(&s, -1.0, 1.0)],
        ),
        case(
            "affine",
            |g, v| {
                let y = g.affine(v[0], -1.5, 0.25)?;
                project(g, y, 13)
            },
            vec![r(&s, -1.0, 1.0)],
        ),
        case(
            "sum",
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.sum(y)
            },
            vec![r(&s, -1.0, 1.0)],
        ),
        case(
            "mean",
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.mean(y)
            },
            vec![r(&s, -1.0, 1.0)],
        ),
        case(
            "sum_per_sample",
            |g, v| {
                let y = g.sum_per_sample(v[0])?;
                project(g, y, 14)
            },
            vec![r(&img, -1.0, 1.0)],
        ),
        case(
            "reshape",
            |g, v| {
                let y = g.reshape(v[0], &[4, 6])?;
                project(g, y, 15)
            },
            vec![r(&s, -1.0, 1.0)],
        ),
        case(
            "conv2d",
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
                project(g, y, 16)
            },
            vec![
                r(&img, -1.0, 1.0),
                r(&[3, 4, 3, 3], -0.5, 0.5),
                r(&[3], -0.5, 0.5),
            ],
        ),
        case(
            "conv2d_stride2_nopad",
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, 2, 0, 1)?;
                project(g, y, 17)
            },
            vec![r(&[2, 4, 7, 7], -1.0, 1.0), r(&[2, 4, 3, 3], -0.5, 0.5)],
        ),
        case(
            "conv2d_grouped",
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 2)?;
                project(g, y, 18)
            },
            vec![
                r(&img, -1.0, 1.0),
                r(&[6, 2, 3, 3], -0.5, 0.5),
                r(&[6], -0.5, 0.5),
            ],
        ),
        case(
            "maxpool2",
            |g, v| {
                let y = g.maxpool2(v[0])?;
                project(g, y, 19)
            },
            vec![r(&img, -1.0, 1.0)],
        ),
        case(
            "upsample2",
            |g, v| {
                let y = g.upsample2(v[0])?;
                project(g, y, 20)
            },
            vec![r(&[2, 3, 3, 3], -1.0, 1.0)],
        ),
        case(
            "global_avg",
            |g, v| {
                let y = g.global_avg(v[0])?;
                project(g, y, 21)
            },
            vec![r(&img, -1.0, 1.0)],
        ),
        case(
            "concat_channels",
            |g, v| {
                let y = g.concat_channels(v[0], v[1])?;
                project(g, y, 22)
            },
            vec![r(&[2, 2, 3, 3], -1.0, 1.0), r(&[2, 3, 3, 3], -1.0, 1.0)],
        ),
        case(
            "slice_channels",
            |g, v| {
                let y = g.slice_channels(v[0], 1, 2)?;
                project(g, y, 23)
            },
            vec![r(&img, -1.0, 1.0)],
        ),
        case(
            "batch_norm_train",
            |g, v| {
                let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                project(g, y, 24)
            },
            vec![r(&img, -1.0, 2.0), r(&[4], 0.5, 1.5), r(&[4], -0.5, 0.5)],
        ),
        case(
            "batch_norm_eval",
            |g, v| {
                let y = g.batch_norm_eval(
                    v[0],
                    v[1],
                    v[2],
                    &[0.1, -0.2, 0.3, 0.0],
                    &[0.5, 1.2, 0.9, 2.0],
                    1e-5,
                )?;
                project(g, y, 25)
            },
            vec![r(&img, -1.0, 1.0), r(&[4], 0.5, 1.5), r(&[4], -0.5, 0.5)],
        ),
        case(
            "linear",
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                project(g, y, 26)
            },
            vec![
                r(&[3, 5], -1.0, 1.0),
                r(&[4, 5], -1.0, 1.0),
                r(&[4], -1.0, 1.0),
            ],
        ),
        case(
            "scale_channels",
            |g, v| {
                let y = g.scale_channels(v[0], v[1])?;
                project(g, y, 27)
            },
            vec![r(&img, -1.0, 1.0), r(&[2, 4], 0.0, 1.0)],
        ),
        case(
            "se_gate",
            |g, v| {
                let w = SeWeights {
                    w1: v[1],
                    b1: v[2],
                    w2: v[3],
                    b2: v[4],
                };
                let y = se_gate(g, v[0], &w, 2)?;
                project(g, y, 28)
            },
            vec![
                r(&img, -1.0, 1.0),
                r(&[2, 4], -1.0, 1.0),
                r(&[2], -0.5, 0.5),
                r(&[4, 2], -1.0, 1.0),
                r(&[4], -0.5, 0.5),
            ],
        ),
        case(
            "focal_loss",
            move |g, v| {
                let p = g.sigmoid(v[0])?;
                focal_loss(g, p, &t1, 2.0, 0.25)
            },
            vec![r(&[2, 1, 4, 4], -3.0, 3.0)],
        ),
        case(
            "dice_loss",
            move |g, v| {
                let p = g.sigmoid(v[0])?;
                dice_loss(g, p, &t2, 1.0)
            },
            vec![r(&[2, 1, 4, 4], -3.0, 3.0)],
        ),
        case(
            "combined_loss",
            move |g, v| combined_loss(g, v[0], &t3, &LossConfig::default()),
            vec![r(&[2, 1, 4, 4], -3.0, 3.0)],
        ),
    ]
}

/// Micro U-Net of `variant` sized for exhaustive finite differences.
pub fn gradcheck_network(variant: BackboneVariant) -> UNetConfig {
    UNetConfig::micro(variant, 2, 4, 11)
}

/// Whole-network check: combined loss of a train-mode forward pass, every
/// learnable tensor and the input image differentiated.
pub fn gradcheck_model(cfg: &UNetConfig) -> Result<GradCheckCase> {
    let mut model = Model::build(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    // Non-trivial affine parameters so that every path carries gradient.
    let perturbed: Vec<Tensor> = model
        .trainable()
        .into_iter()
        .map(|p| {
            let noise = uniform(p.value.shape(), -0.2, 0.2, &mut rng);
            Tensor::new(
                p.value.shape(),
                p.value
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(a, b)| a + b)
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;
    model.set_trainable(perturbed)?;
    // A 4x4 bottleneck: at 2x2 the batch statistics leave gradients near
    // 1e-8 that finite differences at h = 1e-5 cannot resolve.
    let side = 4 << cfg.depth;
    let x = uniform(&[1, cfg.in_channels, side, side], 0.0, 1.0, &mut rng);
    let y = Tensor::new(
        &[1, 1, side, side],
        (0..side * side)
            .map(|_| f64::from(u8::from(rng.random_bool(0.2))))
            .collect(),
    )?;
    let mut inputs = vec![x];
    inputs.extend(model.trainable().into_iter().map(|p| p.value));
    let loss = LossConfig::default();
    let report = grad_check(
        |g, v| {
            let fwd = model.forward_bound(g, v[0], v[1..].to_vec(), BnMode::Train, None)?;
            combined_loss(g, fwd.logits, &y, &loss)
        },
        &inputs,
    )?;
    Ok(GradCheckCase::from_report(
        &format!("unet/{}", cfg.variant),
        report,
    ))
}

/// Every primitive, every loss and one network per backbone variant.
pub fn gradcheck_suite() -> Result<Vec<GradCheckCase>> {
    let mut out = Vec::new();
    for (name, f, inputs) in primitive_cases() {
        out.push(GradCheckCase::from_report(name, grad_check(f, &inputs)?));
    }
    for v in BackboneVariant::ALL {
        out.push(gradcheck_model(&gradcheck_network(v))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfTestOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> SelfTestOutcome {
    SelfTestOutcome {
        name,
        passed,
        detail,
    }
}

/// `P(W+ >= observed)` by listing all `2^n` sign assignments.
pub fn enumerated_signed_rank_p(differences: &[f64]) -> f64 {
    let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return 1.0;
    }
    let (ranks, _) = average_ranks(&nonzero.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let observed: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let n = nonzero.len();
    let mut hits = 0u64;
    for signs in 0u64..(1 << n) {
        let w: f64 = (0..n)
            .filter(|i| signs >> i & 1 == 1)
            .map(|i| ranks[i])
            .sum();
        if w >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

/// Differences with deliberate ties and zeros.
pub fn random_differences(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random_range(-4i32..=6) as f64 * 0.05)
        .collect()
}

fn brute_force_counts(pred: &[u8], gt: &[u8]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for i in 0..pred.len() {
        let (p, g) = (pred[i] == 1, gt[i] == 1);
        if p && g {
            c.tp += 1;
        } else if p {
            c.fp += 1;
        } else if g {
            c.fn_ += 1;
        } else {
            c.tn += 1;
        }
    }
    c
}

fn selftest_wilcoxon() -> Vec<SelfTestOutcome> {
    let r = wilcoxon_one_tailed(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
    let mut out = vec![outcome(
        "wilcoxon_n8_all_positive",
        r.p_value == 0.00390625 && r.method == TestMethod::Exact,
        format!("p = {}", r.p_value),
    )];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for n in 1..=12 {
        for _ in 0..20 {
            let d = random_differences(n, &mut rng);
            worst =
                worst.max((wilcoxon_one_tailed(&d).p_value - enumerated_signed_rank_p(&d)).abs());
        }
    }
    out.push(outcome(
        "wilcoxon_exact_vs_enumeration",
        worst < 1e-12,
        format!("max |dp| = {worst:e}"),
    ));
    let mut worst = 0.0f64;
    for n in 20..=25 {
        for _ in 0..10 {
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-0.6..1.0)).collect();
            worst = worst
                .max((wilcoxon_one_tailed(&d).p_value - wilcoxon_normal_approx(&d).p_value).abs());
        }
    }
    out.push(outcome(
        "wilcoxon_normal_vs_exact",
        worst < 0.01,
        format!("max |dp| = {worst:.5}"),
    ));
    out
}

fn selftest_metrics() -> Vec<SelfTestOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let density = rng.random_range(0.0..1.0);
        let mut draw = || -> Vec<u8> {
            (0..256)
                .map(|_| u8::from(rng.random_bool(density)))
                .collect()
        };
        let (p, g) = (draw(), draw());
        let expected = brute_force_counts(&p, &g);
        let pm = Mask::new(16, 16, p).expect("binary");
        let gm = Mask::new(16, 16, g).expect("binary");
        if confusion(&pm, &gm).ok() != Some(expected) {
            mismatches += 1;
        }
    }
    let empty = metrics(&ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 256,
        fn_: 0,
    });
    let all_bg = metrics(&ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 200,
        fn_: 56,
    });
    vec![
        outcome(
            "confusion_vs_brute_force",
            mismatches == 0,
            format!("{mismatches} of 1000 pairs differ"),
        ),
        outcome(
            "metric_conventions",
            empty.balanced_accuracy.is_none()
                && empty.iou == 1.0
                && all_bg.balanced_accuracy == Some(0.5),
            format!("empty: {empty:?}, all background: {all_bg:?}"),
        ),
    ]
}

fn selftest_threshold() -> Vec<SelfTestOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut bad = 0;
    for trial in 0..200 {
        let n = rng.random_range(1..300);
        let q = rng.random_range(0.01..0.99);
        let values: Vec<f64> = if trial % 2 == 0 {
            (0..n).map(|_| rng.random_range(0..8) as f64).collect()
        } else {
            (0..n).map(|_| rng.random::<f64>()).collect()
        };
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let idx = ((q * n as f64).ceil() as usize).clamp(1, n);
        if nearest_rank_percentile(&values, q).ok() != Some(sorted[idx - 1]) {
            bad += 1;
        }
    }
    let scores = Tensor::new(
        &[1, 1, 32, 32],
        (0..1024).map(|i| (i * 37 % 1024) as f64).collect(),
    )
    .expect("shape");
    let flagged = threshold_mask(&scores, &ThresholdPolicy::default())
        .map(|m| m.positives())
        .unwrap_or(0);
    vec![
        outcome(
            "nearest_rank_vs_sorted_index",
            bad == 0,
            format!("{bad} of 200 inputs differ"),
        ),
        outcome(
            "threshold_flags_top_five_percent",
            flagged == 1024 - nearest_rank_index(1024, 0.95),
            format!("{flagged} pixels flagged"),
        ),
    ]
}

fn selftest_training() -> Vec<SelfTestOutcome> {
    let mut params = vec![Tensor::scalar(1.0)];
    let step = AdamWState::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &params,
    )
    .and_then(|mut s| s.step(&mut params, &[Tensor::scalar(0.5)], &[true]));
    let value = params[0].data()[0];
    vec![outcome(
        "adamw_single_step",
        step.is_ok() && (value - 0.999850000003).abs() < 1e-12,
        format!("theta = {value}"),
    )]
}

/// Metric, statistics, threshold and optimizer oracles.
pub fn selftest_suite() -> Vec<SelfTestOutcome> {
    let mut out = selftest_wilcoxon();
    out.extend(selftest_metrics());
    out.extend(selftest_threshold());
    out.extend(selftest_training());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for (name, f, inputs) in primitive_cases() {
            let case = GradCheckCase::from_report(name, grad_check(f, &inputs).unwrap());
            assert!(case.passed(), "{case:?}");
        }
    }

    #[test]
    fn selftests_pass() {
        for o in selftest_suite() {
            assert!(o.passed, "{o:?}");
        }
    }

    #[test]
    fn enumeration_oracle_examples() {
        assert_eq!(enumerated_signed_rank_p(&[1.0; 8]), 0.00390625);
        assert_eq!(enumerated_signed_rank_p(&[-1.0]), 1.0);
        assert_eq!(enumerated_signed_rank_p(&[0.0, 0.0]), 1.0);
    }
}
