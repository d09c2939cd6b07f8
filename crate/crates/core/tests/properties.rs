use hazlab::adaptation::{
    nearest_rank_percentile, threshold_mask, ChannelMoments, ThresholdPolicy,
};
use hazlab::datasets::Mask;
use hazlab::evaluation::{confusion, metrics, wilcoxon_one_tailed};
use hazlab::harness::verify::enumerated_signed_rank_p;
use hazlab::numerics::{Graph, Tensor};
use hazlab::training::{combined_loss_value, LossConfig};
use proptest::prelude::*;

/// Direct loops over output, channel and kernel positions.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    w: &[f64],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let (cg, og) = (c / groups, co / groups);
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            let g = o / og;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cg {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi =
                                    ((b * c + g * cg + ci) * h + iy as usize) * wd + ix as usize;
                                acc += x[xi] * w[((o * cg + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize)> {
    // (groups, channels per group, out per group, kernel, stride, pad, side)
    (
        1usize..3,
        1usize..3,
        1usize..3,
        prop::sample::select(vec![1usize, 2, 3]),
        1usize..3,
        0usize..2,
        3usize..8,
    )
        .prop_filter("integral extent", |&(_, _, _, k, s, p, side)| {
            side + 2 * p >= k && (side + 2 * p - k) % s == 0
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn convolution_matches_direct_loops(case in conv_case(), seed in any::<u64>()) {
        let (groups, cg, og, k, stride, pad, side) = case;
        let (c, co, n) = (groups * cg, groups * og, 2);
        let mut s = seed;
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5 };
        let x: Vec<f64> = (0..n * c * side * side).map(|_| next()).collect();
        let w: Vec<f64> = (0..co * cg * k * k).map(|_| next()).collect();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[n, c, side, side], x.clone()).unwrap());
        let wv = g.constant(Tensor::new(&[co, cg, k, k], w.clone()).unwrap());
        let y = g.conv2d(xv, wv, None, stride, pad, groups).unwrap();
        let expected = naive_conv(&x, &w, n, c, side, side, co, k, stride, pad, groups);
        let got = g.value(y).data();
        prop_assert_eq!(got.len(), expected.len());
        for (a, b) in got.iter().zip(&expected) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn percentile_is_the_sorted_nearest_rank(values in prop::collection::vec(-5i32..5, 1..200), q in 0.01f64..0.99) {
        // Small integer range forces ties.
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = ((q * values.len() as f64) - 1e-9).ceil().max(1.0) as usize;
        prop_assert_eq!(nearest_rank_percentile(&values, q).unwrap(), sorted[rank - 1]);
    }

    #[test]
    fn distinct_scores_flag_the_top_tail(n in 1usize..400, q in prop::sample::select(vec![0.5, 0.9, 0.95, 0.99])) {
        let side = n;
        let scores: Vec<f64> = (0..side).map(|i| ((i * 7919) % side) as f64).collect();
        let t = Tensor::new(&[1, side], scores).unwrap();
        let mask = threshold_mask(&t, &ThresholdPolicy { quantile: q }).unwrap();
        let rank = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
        prop_assert_eq!(mask.positives(), n - rank);
    }

    #[test]
    fn wilcoxon_matches_enumeration(diffs in prop::collection::vec(prop_oneof![-4i32..-1, 1i32..4, Just(0)], 1..12)) {
        let diffs: Vec<f64> = diffs.into_iter().map(|d| f64::from(d) * 0.125).collect();
        let r = wilcoxon_one_tailed(&diffs);
        prop_assert!((0.0..=1.0).contains(&r.p_value));
        prop_assert!((r.p_value - enumerated_signed_rank_p(&diffs)).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_bounded_and_counts_sum(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 64)) {
        let pred = Mask::new(8, 8, bits.iter().map(|b| u8::from(b.0)).collect()).unwrap();
        let gt = Mask::new(8, 8, bits.iter().map(|b| u8::from(b.1)).collect()).unwrap();
        let c = confusion(&pred, &gt).unwrap();
        prop_assert_eq!(c.total(), 64);
        let s = metrics(&c);
        prop_assert!((0.0..=1.0).contains(&s.iou) && (0.0..=1.0).contains(&s.f1));
        prop_assert!(s.f1 >= s.iou);
        match s.balanced_accuracy {
            Some(b) => prop_assert!((0.0..=1.0).contains(&b) && gt.has_both_classes()),
            None => prop_assert!(!gt.has_both_classes()),
        }
        // Swapping both class labels leaves balanced accuracy unchanged.
        let swapped = metrics(&confusion(&pred.inverted(), &gt.inverted()).unwrap());
        prop_assert_eq!(s.balanced_accuracy, swapped.balanced_accuracy);
    }

    #[test]
    fn moments_are_split_invariant(vals in prop::collection::vec(-3.0f64..3.0, 2 * 12), cut in 1usize..5) {
        let x = Tensor::new(&[6, 2, 2, 1], vals).unwrap();
        let mut whole = ChannelMoments::new(2);
        whole.push(&x).unwrap();
        let parts = x.unstack();
        let mut split = ChannelMoments::new(2);
        split.push(&Tensor::stack(&parts[..cut]).unwrap()).unwrap();
        split.push(&Tensor::stack(&parts[cut..]).unwrap()).unwrap();
        for c in 0..2 {
            prop_assert!((whole.mean()[c] - split.mean()[c]).abs() < 1e-12);
            prop_assert!((whole.variance()[c] - split.variance()[c]).abs() < 1e-12);
            prop_assert!(whole.variance()[c] >= 0.0);
        }
    }

    #[test]
    fn combined_loss_is_non_negative(logits in prop::collection::vec(-30.0f64..30.0, 16), mask in prop::collection::vec(any::<bool>(), 16)) {
        let z = Tensor::new(&[1, 1, 4, 4], logits).unwrap();
        let y = Tensor::new(&[1, 1, 4, 4], mask.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap();
        let l = combined_loss_value(&z, &y, &LossConfig::default()).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }
}
