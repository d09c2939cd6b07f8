//! Segmentation metrics, random baselines and rank-based significance tests.

mod metrics;
mod predictors;
mod wilcoxon;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptation::ThresholdPolicy;
use crate::datasets::SegmentationSample;
use crate::error::{ensure, Result};

pub use metrics::{
    confusion, confusion_raw, metrics, records_csv, ConfusionCounts, MetricsRecord, Scores,
};
pub use predictors::{
    baseline_masks, AllBackground, BaselineFactory, BaselineRegistry, ModelPredictor, Predictor,
    UniformNoise,
};
pub use wilcoxon::{
    average_ranks, rank_sum_one_tailed, wilcoxon_normal_approx, wilcoxon_one_tailed, RankTest,
    SignificanceResult, TestMethod, ALPHA, EXACT_MAX_N,
};

/// Mean and population standard deviation of the defined balanced accuracies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n_defined: usize,
    pub n_undefined: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(records: &[MetricsRecord]) -> Summary {
    let defined: Vec<f64> = records.iter().filter_map(|r| r.balanced_accuracy).collect();
    let (mean, std) = mean_std(&defined);
    Summary {
        mean,
        std,
        n_defined: defined.len(),
        n_undefined: records.len() - defined.len(),
    }
}

/// Per-image records in ascending sample-id order.
pub fn score_records(
    predictor: &dyn Predictor,
    dataset: &[SegmentationSample],
    policy: &ThresholdPolicy,
) -> Result<Vec<MetricsRecord>> {
    ensure!(!dataset.is_empty(), "evaluate", "empty dataset");
    let masks = predictor.masks(dataset, policy)?;
    let mut records = dataset
        .iter()
        .zip(&masks)
        .map(|(s, m)| Ok(MetricsRecord::new(s.sample_id, confusion(m, &s.mask)?)))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.sample_id);
    Ok(records)
}

/// Balanced-accuracy pairs `(ours, theirs)` for images defined on both sides.
pub fn paired_accuracies(ours: &[MetricsRecord], theirs: &[MetricsRecord]) -> Vec<(f64, f64)> {
    let lookup: BTreeMap<u64, f64> = theirs
        .iter()
        .filter_map(|r| r.balanced_accuracy.map(|b| (r.sample_id, b)))
        .collect();
    ours.iter()
        .filter_map(|r| Some((r.balanced_accuracy?, *lookup.get(&r.sample_id)?)))
        .collect()
}

/// One-tailed test that `ours` beats `theirs` on balanced accuracy.
pub fn compare(
    ours: &[MetricsRecord],
    theirs: &[MetricsRecord],
    test: RankTest,
) -> SignificanceResult {
    let pairs = paired_accuracies(ours, theirs);
    match test {
        RankTest::SignedRank => {
            wilcoxon_one_tailed(&pairs.iter().map(|(a, b)| a - b).collect::<Vec<_>>())
        }
        RankTest::RankSum => {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            rank_sum_one_tailed(&a, &b)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
    /// Opponent name and the one-tailed test against it.
    pub significance: Vec<(String, SignificanceResult)>,
}

impl Evaluation {
    /// `opponent,statistic,n_effective,p_value,method,significant`.
    pub fn significance_csv(&self) -> String {
        significance_csv(&self.significance)
    }
}

pub fn significance_csv(rows: &[(String, SignificanceResult)]) -> String {
    let mut out = String::from("opponent,statistic,n_effective,p_value,method,significant\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            r.statistic,
            r.n_effective,
            r.p_value,
            r.method.name(),
            r.significant
        ));
    }
    out
}

/// Scores `predictor` on `dataset` and tests it against every opponent on
/// paired per-image balanced accuracy.
pub fn evaluate(
    predictor: &dyn Predictor,
    dataset: &[SegmentationSample],
    policy: &ThresholdPolicy,
    opponents: &[&dyn Predictor],
    test: RankTest,
) -> Result<Evaluation> {
    let records = score_records(predictor, dataset, policy)?;
    let mut significance = Vec::with_capacity(opponents.len());
    for o in opponents {
        let theirs = score_records(*o, dataset, policy)?;
        significance.push((o.name().to_string(), compare(&records, &theirs, test)));
    }
    Ok(Evaluation {
        summary: summarize(&records),
        records,
        significance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate, GeneratorConfig, Mask, TaskKind};
    use crate::numerics::Tensor;

    /// Scores equal to the ground truth mask.
    struct Oracle;

    impl Predictor for Oracle {
        fn name(&self) -> &str {
            "oracle"
        }

        fn scores(&self, samples: &[SegmentationSample]) -> Result<Vec<Tensor>> {
            samples
                .iter()
                .map(|s| Tensor::new(&[1, 1, s.mask.height(), s.mask.width()], s.mask.to_f64()))
                .collect()
        }
    }

    fn square_samples(n: usize) -> Vec<SegmentationSample> {
        (0..n)
            .map(|i| {
                let mut m = vec![0u8; 100];
                for y in 2..4 {
                    for x in 2..5 {
                        m[y * 10 + x + i % 4] = 1;
                    }
                }
                SegmentationSample::new(
                    i as u64,
                    Tensor::zeros(&[1, 10, 10]),
                    Mask::new(10, 10, m).unwrap(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn perfect_predictor_beats_chance_on_eight_images() {
        // Six positives of 100 pixels: q = 0.94 keeps exactly the mask.
        let data = square_samples(8);
        let policy = ThresholdPolicy { quantile: 0.94 };
        let noise = UniformNoise::new(3);
        let e = evaluate(&Oracle, &data, &policy, &[&noise], RankTest::SignedRank).unwrap();
        assert!(e.records.iter().all(|r| r.balanced_accuracy == Some(1.0)));
        assert_eq!(e.summary.mean, 1.0);
        let (_, sig) = &e.significance[0];
        assert_eq!(sig.n_effective, 8);
        assert!(sig.significant, "{sig:?}");
        assert!(sig.p_value <= 0.00390625);
    }

    #[test]
    fn identical_predictors_give_p_one() {
        let data = generate(&GeneratorConfig::new(TaskKind::Fracture, 6, 1)).unwrap();
        let a = UniformNoise::new(7);
        let b = UniformNoise::new(7);
        let e = evaluate(
            &a,
            &data,
            &ThresholdPolicy::default(),
            &[&b],
            RankTest::SignedRank,
        )
        .unwrap();
        assert_eq!(e.significance[0].1.p_value, 1.0);
        assert!(!e.significance[0].1.significant);
    }

    #[test]
    fn summary_matches_two_pass_recomputation() {
        let data = generate(&GeneratorConfig::new(TaskKind::Landslide, 20, 4)).unwrap();
        let e = evaluate(
            &UniformNoise::new(1),
            &data,
            &ThresholdPolicy::default(),
            &[],
            RankTest::SignedRank,
        )
        .unwrap();
        let values: Vec<f64> = e
            .records
            .iter()
            .map(|r| r.balanced_accuracy.unwrap())
            .collect();
        let mut sum = 0.0;
        for v in &values {
            sum += v;
        }
        let mean = sum / values.len() as f64;
        let mut sq = 0.0;
        for v in &values {
            sq += (v - mean) * (v - mean);
        }
        assert_eq!(e.summary.mean, mean);
        assert_eq!(e.summary.std, (sq / values.len() as f64).sqrt());
        assert_eq!((e.summary.n_defined, e.summary.n_undefined), (20, 0));
    }

    #[test]
    fn undefined_accuracies_are_counted_and_unpaired() {
        let mut data = square_samples(3);
        data[1].mask = Mask::zeros(10, 10);
        let records = score_records(&Oracle, &data, &ThresholdPolicy { quantile: 0.94 }).unwrap();
        let s = summarize(&records);
        assert_eq!((s.n_defined, s.n_undefined), (2, 1));
        assert_eq!(paired_accuracies(&records, &records).len(), 2);
        assert!(score_records(&Oracle, &[], &ThresholdPolicy::default()).is_err());
    }

    #[test]
    fn significance_csv_layout() {
        let r = wilcoxon_one_tailed(&[1.0; 8]);
        let csv = significance_csv(&[("uniform-noise".into(), r)]);
        assert_eq!(
            csv,
            "opponent,statistic,n_effective,p_value,method,significant\nuniform-noise,36,8,0.00390625,exact,true\n"
        );
    }
}
