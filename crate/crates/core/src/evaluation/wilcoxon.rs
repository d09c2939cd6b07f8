use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Significance level of every test.
pub const ALPHA: f64 = 0.01;
/// Largest effective sample size evaluated with the exact null distribution.
pub const EXACT_MAX_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

impl TestMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::NormalApprox => "normal_approx",
        }
    }
}

/// Which paired/unpaired rank test backs a significance result.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankTest {
    #[default]
    SignedRank,
    /// Unpaired Mann-Whitney rank-sum; kept for sensitivity checks.
    RankSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    /// `W+` for the signed-rank test, `U` of the first sample for rank-sum.
    pub statistic: f64,
    pub n_effective: usize,
    pub p_value: f64,
    pub method: TestMethod,
    pub significant: bool,
}

impl SignificanceResult {
    fn new(statistic: f64, n_effective: usize, p_value: f64, method: TestMethod) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        Self {
            statistic,
            n_effective,
            p_value,
            method,
            significant: p_value < ALPHA,
        }
    }
}

/// Average ranks (1-based) of `values`, plus the sizes of tie groups.
pub fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

fn upper_normal_tail(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    1.0 - n.cdf(z)
}

/// `P(W+ >= w)` under the null by counting sign assignments. Ranks are
/// doubled so that average ranks become integers.
fn exact_upper_tail(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut ways = vec![0u64; total + 1];
    ways[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if ways[s] > 0 {
                ways[s + r] += ways[s];
            }
        }
        reach += r;
    }
    let threshold = (2.0 * w_plus).round() as usize;
    let hits: u64 = ways[threshold.min(total + 1)..].iter().sum();
    hits as f64 / 2f64.powi(ranks.len() as i32)
}

struct SignedRanks {
    n: usize,
    w_plus: f64,
    ranks: Vec<f64>,
    ties: Vec<usize>,
}

fn signed_ranks(differences: &[f64]) -> SignedRanks {
    let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    let magnitudes: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&magnitudes);
    let w_plus = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    SignedRanks {
        n: nonzero.len(),
        w_plus,
        ranks,
        ties,
    }
}

fn normal_tail(s: &SignedRanks) -> f64 {
    let n = s.n as f64;
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = s.ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        1.0
    } else {
        upper_normal_tail((s.w_plus - mean - 0.5) / var.sqrt())
    }
}

/// One-tailed paired signed-rank test of `H1: differences > 0`. Zero
/// differences are dropped; exact below [`EXACT_MAX_N`] effective pairs.
pub fn wilcoxon_one_tailed(differences: &[f64]) -> SignificanceResult {
    let s = signed_ranks(differences);
    if s.n == 0 {
        SignificanceResult::new(0.0, 0, 1.0, TestMethod::Exact)
    } else if s.n <= EXACT_MAX_N {
        SignificanceResult::new(
            s.w_plus,
            s.n,
            exact_upper_tail(&s.ranks, s.w_plus),
            TestMethod::Exact,
        )
    } else {
        SignificanceResult::new(s.w_plus, s.n, normal_tail(&s), TestMethod::NormalApprox)
    }
}

/// Normal-approximation path regardless of the sample size, for cross-checks.
pub fn wilcoxon_normal_approx(differences: &[f64]) -> SignificanceResult {
    let s = signed_ranks(differences);
    let p = if s.n == 0 { 1.0 } else { normal_tail(&s) };
    SignificanceResult::new(s.w_plus, s.n, p, TestMethod::NormalApprox)
}

/// One-tailed Mann-Whitney test of `H1: a tends to exceed b` (normal
/// approximation with tie and continuity corrections).
pub fn rank_sum_one_tailed(a: &[f64], b: &[f64]) -> SignificanceResult {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return SignificanceResult::new(0.0, 0, 1.0, TestMethod::NormalApprox);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = average_ranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let (f1, f2) = (n1 as f64, n2 as f64);
    let u = r1 - f1 * (f1 + 1.0) / 2.0;
    let n = f1 + f2;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>();
    let var = f1 * f2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        upper_normal_tail((u - f1 * f2 / 2.0 - 0.5) / var.sqrt())
    };
    SignificanceResult::new(u, n1 + n2, p, TestMethod::NormalApprox)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_positive_eight() {
        let r = wilcoxon_one_tailed(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        assert_eq!(r.statistic, 36.0);
        assert_eq!(r.p_value, 0.00390625);
        assert_eq!(r.method, TestMethod::Exact);
        assert!(r.significant);
    }

    #[test]
    fn zeros_and_empty_input() {
        let r = wilcoxon_one_tailed(&[0.0, 0.0, 0.0]);
        assert_eq!((r.p_value, r.n_effective, r.significant), (1.0, 0, false));
        let r = wilcoxon_one_tailed(&[0.0, 0.3, 0.0]);
        assert_eq!(r.n_effective, 1);
        assert_eq!(r.p_value, 0.5);
    }

    #[test]
    fn symmetric_differences_are_not_evidence() {
        let r = wilcoxon_one_tailed(&[0.1, -0.1, 0.4, -0.4, 0.25, -0.25]);
        assert!(r.p_value >= 0.5);
        assert!(!r.significant);
    }

    #[test]
    fn boundary_is_not_significant() {
        let r = SignificanceResult::new(0.0, 1, ALPHA, TestMethod::Exact);
        assert!(!r.significant);
        let r = SignificanceResult::new(0.0, 1, 0.009_999_999, TestMethod::Exact);
        assert!(r.significant);
    }

    #[test]
    fn average_ranks_with_ties() {
        let (r, t) = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, vec![1, 1, 2]);
    }

    #[test]
    fn large_samples_use_the_normal_path() {
        let d: Vec<f64> = (1..=40)
            .map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 })
            .collect();
        let r = wilcoxon_one_tailed(&d);
        assert_eq!(r.method, TestMethod::NormalApprox);
        assert_eq!(r.n_effective, 40);
        assert!(r.p_value < 0.05);
    }

    #[test]
    fn rank_sum_detects_shift() {
        let a: Vec<f64> = (0..30).map(|i| 1.0 + i as f64 * 0.01).collect();
        let b: Vec<f64> = (0..30).map(|i| i as f64 * 0.01).collect();
        assert!(rank_sum_one_tailed(&a, &b).significant);
        assert!(!rank_sum_one_tailed(&b, &a).significant);
        assert_eq!(rank_sum_one_tailed(&a, &[]).p_value, 1.0);
    }
}
