//! Token-bucket aggregation and significance testing in log space.
//!
//! Trials are grouped into fixed-width token buckets (label = lower
//! edge by floor division), tiny buckets are dropped, and each bucket
//! gets an exact two-sided binomial test against a null accuracy. The
//! correlation between token count and correctness is summarized by a
//! point-biserial coefficient with a two-sided t-distribution p-value.
//!
//! All p-values are carried as `log10_p` rather than raw probabilities:
//! degradation on big contexts produces significance magnitudes around
//! 1e-244 and beyond, far past the ~1e-308 double-precision underflow
//! line once a few are multiplied together. Tail sums use log-sum-exp
//! and the t tail goes through a log-form regularized incomplete beta,
//! so values stay finite and ordered well below -300.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_10: f64 = std::f64::consts::LN_10;

/// One trial reduced to what the statistics need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialPoint {
    pub tokens: u64,
    pub correct: bool,
}

/// Which test produced a stored `log10_p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestId {
    PointBiserialT,
    BinomialVsNull,
}

/// Aggregated accuracy and significance for one token bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    /// Lower edge in tokens: `floor(tokens / width) * width`.
    pub bucket_label: u64,
    pub width: u64,
    pub n: u64,
    pub k: u64,
    pub accuracy: f64,
    pub log10_p: f64,
    pub test_id: TestId,
}

impl BucketStat {
    /// Exclusive upper edge of the bucket.
    pub fn upper_edge(&self) -> u64 {
        self.bucket_label + self.width
    }
}

/// Result of [`clean_buckets`]: what survived and what was dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanedBuckets {
    pub kept: Vec<BucketStat>,
    pub removed: Vec<BucketStat>,
}

/// Point-biserial correlation between token count and correctness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r_pb: f64,
    pub df: u64,
    pub log10_p: f64,
}

/// Groups trials into buckets of `width` tokens (ascending by label)
/// and attaches the binomial-vs-null significance at `p0` to each.
pub fn bucketize(points: &[TrialPoint], width: u64, p0: f64) -> Result<Vec<BucketStat>> {
    if width == 0 {
        return Err(Error::Validation("bucket width must be positive".into()));
    }
    let mut tallies: std::collections::BTreeMap<u64, (u64, u64)> = std::collections::BTreeMap::new();
    for point in points {
        let label = point.tokens / width * width;
        let entry = tallies.entry(label).or_insert((0, 0));
        entry.0 += 1;
        if point.correct {
            entry.1 += 1;
        }
    }
    tallies
        .into_iter()
        .map(|(bucket_label, (n, k))| {
            Ok(BucketStat {
                bucket_label,
                width,
                n,
                k,
                accuracy: k as f64 / n as f64,
                log10_p: binomial_log_p(n, k, p0)?,
                test_id: TestId::BinomialVsNull,
            })
        })
        .collect()
}

/// Drops buckets with n ≤ 2 — too few trials for their accuracy to
/// mean anything — and logs each removal.
pub fn clean_buckets(buckets: Vec<BucketStat>) -> CleanedBuckets {
    let (kept, removed): (Vec<_>, Vec<_>) = buckets.into_iter().partition(|b| b.n > 2);
    for bucket in &removed {
        log::info!(
            "dropping bucket {} (n={} is below the 3-trial floor)",
            bucket.bucket_label,
            bucket.n
        );
    }
    CleanedBuckets { kept, removed }
}

/// Point-biserial correlation of correctness against token count, with
/// a two-sided t-test p-value computed in log space.
///
/// r = (M1 − M0)/s · sqrt(p·q), where M1/M0 are mean token counts of
/// the correct/incorrect groups, s the population standard deviation of
/// all token counts, and p/q the two class fractions. The t statistic
/// is r·sqrt(df/(1−r²)) with df = n−2.
pub fn point_biserial(points: &[TrialPoint]) -> Result<CorrelationResult> {
    let n = points.len();
    if n < 3 {
        return Err(Error::DegenerateInput(format!(
            "need at least 3 trials for a correlation, got {n}"
        )));
    }
    let n1 = points.iter().filter(|p| p.correct).count();
    let n0 = n - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::DegenerateInput(
            "all trials share one outcome; correlation undefined".into(),
        ));
    }

    let nf = n as f64;
    let mean_all = points.iter().map(|p| p.tokens as f64).sum::<f64>() / nf;
    let variance = points
        .iter()
        .map(|p| {
            let d = p.tokens as f64 - mean_all;
            d * d
        })
        .sum::<f64>()
        / nf;
    if variance <= 0.0 {
        return Err(Error::DegenerateInput(
            "token counts have zero variance; correlation undefined".into(),
        ));
    }
    let s = variance.sqrt();

    let mean_correct = points
        .iter()
        .filter(|p| p.correct)
        .map(|p| p.tokens as f64)
        .sum::<f64>()
        / n1 as f64;
    let mean_wrong = points
        .iter()
        .filter(|p| !p.correct)
        .map(|p| p.tokens as f64)
        .sum::<f64>()
        / n0 as f64;

    let p = n1 as f64 / nf;
    let q = n0 as f64 / nf;
    let r_pb = ((mean_correct - mean_wrong) / s * (p * q).sqrt()).clamp(-1.0, 1.0);

    let df = (n - 2) as u64;
    let log10_p = t_two_sided_log10_p(r_to_t(r_pb, df), df);

    Ok(CorrelationResult { r_pb, df, log10_p })
}

/// t statistic for a correlation coefficient at the given degrees of
/// freedom; infinite when |r| = 1 (perfect separation).
fn r_to_t(r: f64, df: u64) -> f64 {
    let denom = 1.0 - r * r;
    if denom <= 0.0 {
        return if r >= 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
    }
    r * (df as f64 / denom).sqrt()
}

/// Two-sided t-distribution p-value as log10, via the identity
/// P(|T| ≥ t) = I_{df/(df+t²)}(df/2, 1/2) evaluated in log form.
pub fn t_two_sided_log10_p(t: f64, df: u64) -> f64 {
    if df == 0 {
        return 0.0;
    }
    if t.is_infinite() {
        return f64::NEG_INFINITY;
    }
    let dff = df as f64;
    let x = dff / (dff + t * t);
    let ln_p = ln_beta_inc_reg(dff / 2.0, 0.5, x);
    (ln_p / LN_10).min(0.0)
}

/// Exact two-sided binomial test of `k` successes in `n` at null
/// probability `p0`, as log10 of p = min(1, 2·min(P(X≤k), P(X≥k))).
/// Both tails are summed with log-sum-exp, so the result is finite even
/// when the underlying probability underflows f64.
pub fn binomial_log_p(n: u64, k: u64, p0: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Validation("binomial test needs n >= 1".into()));
    }
    if k > n {
        return Err(Error::Validation(format!("k={k} exceeds n={n}")));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Validation(format!(
            "null probability must lie strictly inside (0, 1), got {p0}"
        )));
    }

    let ln_pmf = ln_binomial_pmf_table(n, p0);
    let lower = log_sum_exp(&ln_pmf[..=k as usize]);
    let upper = log_sum_exp(&ln_pmf[k as usize..]);
    let ln_p = (std::f64::consts::LN_2 + lower.min(upper)).min(0.0);
    Ok((ln_p / LN_10).min(0.0))
}

/// ln of the binomial pmf for i = 0..=n, built incrementally from the
/// ratio pmf(i+1)/pmf(i) to avoid n log-gamma evaluations.
fn ln_binomial_pmf_table(n: u64, p0: f64) -> Vec<f64> {
    let ln_p = p0.ln();
    let ln_q = (1.0 - p0).ln();
    let mut table = Vec::with_capacity(n as usize + 1);
    let mut lp = n as f64 * ln_q; // pmf(0)
    table.push(lp);
    for i in 0..n {
        lp += ((n - i) as f64).ln() - ((i + 1) as f64).ln() + ln_p - ln_q;
        table.push(lp);
    }
    table
}

/// Stable ln(Σ exp(xᵢ)).
fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

/// ln of the regularized incomplete beta function I_x(a, b).
///
/// Continued-fraction evaluation with the prefactor kept in log form;
/// when x is past the symmetry point, the complement is evaluated
/// instead and folded back with ln(1−e^y). This keeps deep tails
/// (I_x ~ 1e-1000) representable.
fn ln_beta_inc_reg(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "beta parameters must be positive");
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if x >= 1.0 {
        return 0.0;
    }
    let ln_prefactor =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (-x).ln_1p();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_prefactor + beta_continued_fraction(a, b, x).ln() - a.ln()
    } else {
        let ln_complement =
            ln_prefactor + beta_continued_fraction(b, a, 1.0 - x).ln() - b.ln();
        (-ln_complement.exp()).ln_1p()
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITERATIONS: usize = 500;
    const EPS: f64 = 3e-16;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITERATIONS {
        let mf = m as f64;
        let m2 = 2.0 * mf;

        let numerator = mf * (b - mf) * x / ((qam + m2) * (a + m2));
        d = 1.0 + numerator * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + numerator / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;

        let numerator = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
        d = 1.0 + numerator * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + numerator / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pt(tokens: u64, correct: bool) -> TrialPoint {
        TrialPoint { tokens, correct }
    }

    #[test]
    fn bucket_labels_follow_the_floor_rule() {
        let buckets = bucketize(&[pt(250, true)], 100, 0.5).unwrap();
        assert_eq!(buckets[0].bucket_label, 200);
        let buckets = bucketize(&[pt(5000, true)], 5000, 0.5).unwrap();
        assert_eq!(buckets[0].bucket_label, 5000);
    }

    #[test]
    fn bucketize_groups_and_orders() {
        let points = [pt(50, true), pt(120, true), pt(130, false), pt(460, true)];
        let buckets = bucketize(&points, 100, 0.5).unwrap();
        let summary: Vec<(u64, u64, u64)> =
            buckets.iter().map(|b| (b.bucket_label, b.n, b.k)).collect();
        assert_eq!(summary, vec![(0, 1, 1), (100, 2, 1), (400, 1, 1)]);
        assert!(buckets.iter().all(|b| b.test_id == TestId::BinomialVsNull));
    }

    #[test]
    fn bucket_counts_partition_the_trials() {
        let points: Vec<TrialPoint> = (0..997)
            .map(|i| pt(i * 37 % 5000, i % 3 == 0))
            .collect();
        let buckets = bucketize(&points, 250, 0.5).unwrap();
        let total: u64 = buckets.iter().map(|b| b.n).sum();
        assert_eq!(total as usize, points.len());
    }

    #[test]
    fn bucketize_rejects_zero_width() {
        assert!(bucketize(&[pt(1, true)], 0, 0.5).is_err());
    }

    #[test]
    fn cleaning_drops_n_at_most_two_keeps_three() {
        let points = [
            // label 0: n=2 → dropped
            pt(10, true),
            pt(20, true),
            // label 100: n=3 → kept
            pt(110, true),
            pt(120, false),
            pt(130, true),
            // label 200: n=1 → dropped
            pt(210, false),
        ];
        let cleaned = clean_buckets(bucketize(&points, 100, 0.5).unwrap());
        let kept: Vec<u64> = cleaned.kept.iter().map(|b| b.bucket_label).collect();
        let removed: Vec<u64> = cleaned.removed.iter().map(|b| b.bucket_label).collect();
        assert_eq!(kept, vec![100]);
        assert_eq!(removed, vec![0, 200]);
    }

    #[test]
    fn cleaning_empty_input_is_empty() {
        let cleaned = clean_buckets(vec![]);
        assert!(cleaned.kept.is_empty());
        assert!(cleaned.removed.is_empty());
    }

    #[test]
    fn point_biserial_matches_the_worked_example() {
        // Correct at 100 and 200 tokens, wrong at 300 and 400:
        // (150 − 350)/111.803... · 0.5 = −0.894427...
        let points = [pt(100, true), pt(200, true), pt(300, false), pt(400, false)];
        let result = point_biserial(&points).unwrap();
        assert_abs_diff_eq!(result.r_pb, -0.894_427_190_999_915_9, epsilon = 1e-12);
        assert_eq!(result.df, 2);
        // p two-sided for t = −2.8284, df = 2 is 0.105572...; pinned from
        // an independent numerical evaluation.
        assert_abs_diff_eq!(
            10f64.powf(result.log10_p),
            0.105_572_809,
            epsilon = 1e-6
        );
    }

    #[test]
    fn point_biserial_rejects_degenerate_input() {
        assert!(point_biserial(&[pt(1, true), pt(2, false)]).is_err());
        assert!(point_biserial(&[pt(1, true), pt(2, true), pt(3, true)]).is_err());
        assert!(point_biserial(&[pt(5, true), pt(5, false), pt(5, true)]).is_err());
    }

    #[test]
    fn t_tail_matches_pinned_reference_values() {
        // Two-sided p for t=2.228, df=10 is 0.0500118 (classic critical
        // value); reference from independent numerical integration.
        let lp = t_two_sided_log10_p(2.228, 10);
        assert_abs_diff_eq!(10f64.powf(lp), 0.050_011_77, epsilon = 1e-6);
        // Symmetry in t.
        assert_abs_diff_eq!(
            t_two_sided_log10_p(-2.228, 10),
            t_two_sided_log10_p(2.228, 10),
            epsilon = 1e-12
        );
        // t = 0 → p = 1.
        assert_abs_diff_eq!(t_two_sided_log10_p(0.0, 10), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn t_tail_stays_finite_and_monotone_into_deep_tails() {
        let mut previous = 0.0;
        for t in (5..=60).map(|v| v as f64) {
            let lp = t_two_sided_log10_p(t, 1000);
            assert!(lp.is_finite(), "t={t} gave non-finite log10_p");
            assert!(lp < previous, "tail must shrink as t grows");
            previous = lp;
        }
        assert!(
            previous < -300.0,
            "t=60, df=1000 should be far below the f64 underflow line, got {previous}"
        );
    }

    #[test]
    fn binomial_examples_from_first_principles() {
        // n=1, k=1: both tails cover everything → p = 1.
        assert_abs_diff_eq!(binomial_log_p(1, 1, 0.5).unwrap(), 0.0, epsilon = 1e-12);
        // n=10, k=10: p = 2·0.5^10 → log10 = log10(2^-9).
        assert_abs_diff_eq!(
            binomial_log_p(10, 10, 0.5).unwrap(),
            (2f64 * 0.5f64.powi(10)).log10(),
            epsilon = 1e-12
        );
        // n=20, k=10: dead central → p clamps to 1.
        assert_abs_diff_eq!(binomial_log_p(20, 10, 0.5).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn binomial_matches_direct_summation_when_representable() {
        for &(n, k, p0) in &[
            (8u64, 2u64, 0.5f64),
            (25, 20, 0.7),
            (40, 5, 0.3),
            (50, 50, 0.9),
            (33, 0, 0.4),
        ] {
            let direct = direct_two_sided(n, k, p0);
            let ours = 10f64.powf(binomial_log_p(n, k, p0).unwrap());
            assert_abs_diff_eq!(ours, direct, epsilon = 1e-11 * direct.max(1e-30));
        }
    }

    #[test]
    fn binomial_is_symmetric_at_half() {
        for n in [5u64, 12, 31] {
            for k in 0..=n {
                let a = binomial_log_p(n, k, 0.5).unwrap();
                let b = binomial_log_p(n, n - k, 0.5).unwrap();
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn binomial_survives_underflow_scale_inputs() {
        // 3000 trials all correct against p0=0.5: p = 2·2^-3000,
        // log10 ≈ -902. Direct arithmetic would underflow to zero.
        let lp = binomial_log_p(3000, 3000, 0.5).unwrap();
        assert!(lp.is_finite());
        assert_abs_diff_eq!(lp, -(3000f64 * 2f64.log10() - 2f64.log10()), epsilon = 1e-6);
    }

    #[test]
    fn binomial_validates_inputs() {
        assert!(binomial_log_p(0, 0, 0.5).is_err());
        assert!(binomial_log_p(5, 6, 0.5).is_err());
        assert!(binomial_log_p(5, 3, 0.0).is_err());
        assert!(binomial_log_p(5, 3, 1.0).is_err());
    }

    #[test]
    fn correlation_significance_grows_with_effect_size() {
        // At fixed df, a larger |r| must give a smaller (more negative)
        // log10_p.
        let df = 20u64;
        let mut previous = 1.0;
        for step in 1..19 {
            let r = step as f64 * 0.05;
            let lp = t_two_sided_log10_p(r_to_t(r, df), df);
            assert!(lp < previous, "log10_p must fall as r grows (r={r})");
            previous = lp;
        }
    }

    /// Direct f64 two-sided binomial for small n, used as the oracle.
    fn direct_two_sided(n: u64, k: u64, p0: f64) -> f64 {
        let pmf = |i: u64| {
            let ln = ln_gamma(n as f64 + 1.0)
                - ln_gamma(i as f64 + 1.0)
                - ln_gamma((n - i) as f64 + 1.0)
                + i as f64 * p0.ln()
                + (n - i) as f64 * (1.0 - p0).ln();
            ln.exp()
        };
        let lower: f64 = (0..=k).map(pmf).sum();
        let upper: f64 = (k..=n).map(pmf).sum();
        (2.0 * lower.min(upper)).min(1.0)
    }

    proptest! {
        #[test]
        fn binomial_log_p_is_never_positive(n in 1u64..200, k_frac in 0.0f64..=1.0, p0 in 0.05f64..0.95) {
            let k = ((n as f64) * k_frac).round() as u64;
            let lp = binomial_log_p(n, k.min(n), p0).unwrap();
            prop_assert!(lp <= 0.0);
            prop_assert!(lp.is_finite());
        }

        #[test]
        fn bucketize_partitions_arbitrary_points(tokens in proptest::collection::vec(0u64..100_000, 1..300), width in 1u64..10_000) {
            let points: Vec<TrialPoint> =
                tokens.iter().map(|&t| pt(t, t % 2 == 0)).collect();
            let buckets = bucketize(&points, width, 0.5).unwrap();
            let total: u64 = buckets.iter().map(|b| b.n).sum();
            prop_assert_eq!(total as usize, points.len());
            prop_assert!(buckets.windows(2).all(|w| w[0].bucket_label < w[1].bucket_label));
            for b in &buckets {
                prop_assert!(b.k <= b.n);
                prop_assert!((0.0..=1.0).contains(&b.accuracy));
                prop_assert!(b.log10_p <= 0.0);
            }
        }
    }
}
