//! Statistical kernel: two-sample Kolmogorov-Smirnov test, the generalized
//! likelihood-ratio decision rule, and confusion-matrix metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("two-sample test requires non-empty samples")]
    EmptySample,
}

/// Result of a two-sample Kolmogorov-Smirnov test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    /// Supremum distance between the two empirical CDFs, in `[0, 1]`.
    pub statistic: f64,
    /// Asymptotic two-sided p-value, clamped to `[0, 1]`.
    pub p_value: f64,
}

impl KsResult {
    /// Rejects the null hypothesis of a common distribution at level `alpha`.
    pub fn rejects_at(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Two-sample Kolmogorov-Smirnov test.
///
/// The statistic is the supremum of `|F_a(x) - F_b(x)|` over the pooled
/// sample points, computed by a sorted merge that steps both empirical CDFs
/// jointly so ties are handled exactly. The p-value is the asymptotic
/// Kolmogorov series with effective sample size `n_e = |a||b| / (|a| + |b|)`:
///
/// ```text
/// p = 2 * sum_{k >= 1} (-1)^(k-1) * exp(-2 k^2 (sqrt(n_e) * D)^2)
/// ```
///
/// truncated once terms drop below `1e-10` and clamped to `[0, 1]`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).expect("finite sample values"));
    ys.sort_by(|p, q| p.partial_cmp(q).expect("finite sample values"));

    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let mut i = 0usize;
    let mut j = 0usize;
    let mut statistic = 0.0f64;
    while i < xs.len() && j < ys.len() {
        let x = xs[i].min(ys[j]);
        // Advance both CDFs past every point equal to x before comparing,
        // so tied observations in either sample count together.
        while i < xs.len() && xs[i] <= x {
            i += 1;
        }
        while j < ys.len() && ys[j] <= x {
            j += 1;
        }
        let gap = (i as f64 / na - j as f64 / nb).abs();
        if gap > statistic {
            statistic = gap;
        }
    }

    let n_e = na * nb / (na + nb);
    let p_value = kolmogorov_survival(n_e.sqrt() * statistic);
    Ok(KsResult { statistic, p_value })
}

/// Asymptotic survival function of the Kolmogorov distribution at `x`.
fn kolmogorov_survival(x: f64) -> f64 {
    // The alternating series degenerates to +-1 terms as x -> 0; the true
    // limit there is 1, so short-circuit instead of failing to truncate.
    if x < 1e-6 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=1000 {
        let term = (-2.0 * (k as f64) * (k as f64) * x * x).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-10 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Generalized likelihood-ratio decision: retain the equivalence hypothesis
/// iff the mean log-likelihood ratio `lambda` is at least `ln(c)`.
///
/// `c` is the ratio threshold in `(0, 1]`; smaller values tolerate lower
/// cross-model likelihoods before rejecting.
pub fn glrt_decision(lambda: f64, c: f64) -> bool {
    assert!(c > 0.0 && c <= 1.0, "ratio threshold must lie in (0, 1]");
    lambda >= c.ln()
}

/// Pairwise decision counts against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, decision: bool, truth: bool) {
        match (decision, truth) {
            (true, true) => self.true_positives += 1,
            (true, false) => self.false_positives += 1,
            (false, false) => self.true_negatives += 1,
            (false, true) => self.false_negatives += 1,
        }
    }
}

/// Precision, recall, F1, and Matthews correlation for one set of counts.
///
/// Degenerate denominators yield 0 rather than an error: a metric over an
/// empty slice of outcomes carries no information, and 0 is the
/// conservative report value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
}

impl Metrics {
    pub fn from_counts(c: ConfusionCounts) -> Metrics {
        let tp = c.true_positives as f64;
        let fp = c.false_positives as f64;
        let tn = c.true_negatives as f64;
        let fne = c.false_negatives as f64;

        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fne);
        let f1 = ratio(2.0 * precision * recall, precision + recall);

        let root = ((tp + fp) * (tp + fne) * (tn + fp) * (tn + fne)).sqrt();
        let mcc = ratio(tp * tn - fp * fne, root);

        Metrics { precision, recall, f1, mcc }
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identical_samples_have_zero_statistic() {
        let a = [0.3, 1.2, -0.5, 2.0];
        let r = ks_two_sample(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(!r.rejects_at(0.1));
    }

    #[test]
    fn disjoint_samples_have_statistic_one() {
        let a = [0.0, 0.0, 0.0, 0.0];
        let b = [1.0, 1.0, 1.0, 1.0];
        let r = ks_two_sample(&a, &b).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!(r.rejects_at(0.1));
    }

    #[test]
    fn empty_sample_is_rejected() {
        assert_eq!(ks_two_sample(&[], &[1.0]), Err(StatsError::EmptySample));
        assert_eq!(ks_two_sample(&[1.0], &[]), Err(StatsError::EmptySample));
    }

    #[test]
    fn statistic_matches_a_known_case() {
        // a: ECDF steps at 1,2,3; b: steps at 2.5, 3.5.
        // Just past 2: F_a = 2/3, F_b = 0.
        let r = ks_two_sample(&[1.0, 2.0, 3.0], &[2.5, 3.5]).unwrap();
        assert_relative_eq!(r.statistic, 2.0 / 3.0);
    }

    #[test]
    fn large_equal_samples_give_high_p() {
        let a: Vec<f64> = (0..500).map(|i| (i as f64) * 0.01).collect();
        let b: Vec<f64> = (0..500).map(|i| (i as f64) * 0.01 + 0.005).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        assert!(r.p_value > 0.5, "near-identical grids, p = {}", r.p_value);
    }

    #[test]
    fn survival_function_known_values() {
        // Q(1.0) = 2 * (e^-2 - e^-8 + e^-18 - ...) = 0.2700 to 4 digits.
        assert!((kolmogorov_survival(1.0) - 0.27).abs() < 1e-3);
        assert_eq!(kolmogorov_survival(0.0), 1.0);
        assert!(kolmogorov_survival(3.0) < 1e-6);
    }

    #[test]
    fn glrt_threshold_is_log_c() {
        assert!(glrt_decision(0.0, 0.001));
        assert!(glrt_decision(-6.9, 0.001));
        assert!(!glrt_decision(-6.91, 0.001));
        assert!(glrt_decision(f64::ln(0.001), 0.001));
    }

    #[test]
    #[should_panic]
    fn glrt_rejects_bad_threshold() {
        glrt_decision(0.0, 0.0);
    }

    #[test]
    fn metrics_for_perfect_predictions() {
        let counts = ConfusionCounts {
            true_positives: 10,
            false_positives: 0,
            true_negatives: 90,
            false_negatives: 0,
        };
        let m = Metrics::from_counts(counts);
        assert_relative_eq!(m.precision, 1.0);
        assert_relative_eq!(m.recall, 1.0);
        assert_relative_eq!(m.f1, 1.0);
        assert_relative_eq!(m.mcc, 1.0);
    }

    #[test]
    fn metrics_zero_factor_yields_zero_mcc() {
        // Everything predicted positive: tn = fn = 0 zeroes a root factor.
        let counts = ConfusionCounts {
            true_positives: 458,
            false_positives: 5320,
            true_negatives: 0,
            false_negatives: 0,
        };
        let m = Metrics::from_counts(counts);
        assert_eq!(m.mcc, 0.0);
        assert_relative_eq!(m.recall, 1.0);
    }

    #[test]
    fn all_wrong_gives_negative_mcc() {
        let counts = ConfusionCounts {
            true_positives: 0,
            false_positives: 5,
            true_negatives: 0,
            false_negatives: 5,
        };
        let m = Metrics::from_counts(counts);
        assert_relative_eq!(m.mcc, -1.0);
    }

    #[test]
    fn record_routes_outcomes() {
        let mut c = ConfusionCounts::default();
        c.record(true, true);
        c.record(true, false);
        c.record(false, false);
        c.record(false, true);
        assert_eq!(
            c,
            ConfusionCounts {
                true_positives: 1,
                false_positives: 1,
                true_negatives: 1,
                false_negatives: 1
            }
        );
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn sample() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-100.0f64..100.0, 1..60)
        }

        proptest! {
            #[test]
            fn statistic_is_symmetric(a in sample(), b in sample()) {
                let ab = ks_two_sample(&a, &b).unwrap();
                let ba = ks_two_sample(&b, &a).unwrap();
                prop_assert_eq!(ab, ba);
            }

            #[test]
            fn statistic_in_unit_interval(a in sample(), b in sample()) {
                let r = ks_two_sample(&a, &b).unwrap();
                prop_assert!((0.0..=1.0).contains(&r.statistic));
                prop_assert!((0.0..=1.0).contains(&r.p_value));
            }

            #[test]
            fn invariant_under_increasing_transform(a in sample(), b in sample()) {
                let f = |x: f64| (x * 0.01).exp() + 0.5 * x;
                let fa: Vec<f64> = a.iter().map(|&x| f(x)).collect();
                let fb: Vec<f64> = b.iter().map(|&x| f(x)).collect();
                let plain = ks_two_sample(&a, &b).unwrap();
                let mapped = ks_two_sample(&fa, &fb).unwrap();
                prop_assert!((plain.statistic - mapped.statistic).abs() < 1e-12);
            }

            #[test]
            fn glrt_is_monotone_in_lambda(l1 in -50.0f64..50.0, l2 in -50.0f64..50.0, c in 0.0001f64..1.0) {
                let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
                if glrt_decision(lo, c) {
                    prop_assert!(glrt_decision(hi, c));
                }
            }

            #[test]
            fn mcc_stays_in_range(tp in 0u64..1000, fp in 0u64..1000, tn in 0u64..1000, fne in 0u64..1000) {
                let m = Metrics::from_counts(ConfusionCounts {
                    true_positives: tp,
                    false_positives: fp,
                    true_negatives: tn,
                    false_negatives: fne,
                });
                prop_assert!((-1.0..=1.0).contains(&m.mcc));
                prop_assert!((0.0..=1.0).contains(&m.precision));
                prop_assert!((0.0..=1.0).contains(&m.recall));
                prop_assert!((0.0..=1.0).contains(&m.f1));
            }
        }
    }
}
