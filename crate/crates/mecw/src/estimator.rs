//! Locating the maximum effective context window (MECW) and ranking
//! models per task.
//!
//! Two estimators are offered, both operating on cleaned bucket series
//! and both reporting the boundary as a bucket upper edge — never an
//! interpolated token count the data cannot actually resolve:
//!
//! * `threshold_sustained` (the default): a baseline accuracy is taken
//!   from the first buckets; the window ends just before the first run
//!   of `k_sustain` consecutive buckets that sit more than `delta`
//!   below it. One noisy bucket cannot terminate the window.
//! * `changepoint_bernoulli`: the cut that maximizes a two-segment
//!   Bernoulli likelihood; robust when degradation is gradual enough
//!   that the threshold rule fires early on the slope. A likelihood
//!   gain below [`CHANGEPOINT_GAIN_THRESHOLD`] marks the cut
//!   unreliable and the series is reported as not yet degraded.
//!
//! [`analyze_run`] applies both to every (model, task) group of a
//! stored run and assembles the bundle that `report` renders. The
//! cascading-failure helper [`cascade_success`] lives here too: chain
//! n agents, each right with probability p, and the chain is right
//! with probability pⁿ.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::stats::{self, BucketStat, CorrelationResult, TrialPoint};
use crate::store::Store;
use crate::tasks::TaskType;

/// Estimated window boundary: a token count, or "never degraded within
/// the tested range".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MecwTokens {
    Finite(u64),
    AtOrAboveMaxTested,
}

impl MecwTokens {
    pub fn as_finite(self) -> Option<u64> {
        match self {
            MecwTokens::Finite(v) => Some(v),
            MecwTokens::AtOrAboveMaxTested => None,
        }
    }
}

impl Ord for MecwTokens {
    /// The sentinel outranks every finite value: a model that never
    /// degraded within the tested range sorts above any measured
    /// boundary.
    fn cmp(&self, other: &Self) -> Ordering {
        use MecwTokens::*;
        match (self, other) {
            (Finite(a), Finite(b)) => a.cmp(b),
            (Finite(_), AtOrAboveMaxTested) => Ordering::Less,
            (AtOrAboveMaxTested, Finite(_)) => Ordering::Greater,
            (AtOrAboveMaxTested, AtOrAboveMaxTested) => Ordering::Equal,
        }
    }
}

impl PartialOrd for MecwTokens {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for MecwTokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MecwTokens::Finite(v) => write!(f, "{v}"),
            MecwTokens::AtOrAboveMaxTested => f.write_str("at_or_above_max_tested"),
        }
    }
}

impl Serialize for MecwTokens {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MecwTokens::Finite(v) => serializer.serialize_u64(*v),
            MecwTokens::AtOrAboveMaxTested => {
                serializer.serialize_str("at_or_above_max_tested")
            }
        }
    }
}

impl<'de> Deserialize<'de> for MecwTokens {
    fn deserialize<D: Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        struct Visitor;
        impl serde::de::Visitor<'_> for Visitor {
            type Value = MecwTokens;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a token count or \"at_or_above_max_tested\"")
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<MecwTokens, E> {
                Ok(MecwTokens::Finite(v))
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<MecwTokens, E> {
                u64::try_from(v)
                    .map(MecwTokens::Finite)
                    .map_err(|_| E::custom("token count must be nonnegative"))
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<MecwTokens, E> {
                if v == "at_or_above_max_tested" {
                    Ok(MecwTokens::AtOrAboveMaxTested)
                } else {
                    Err(E::custom(format!("unknown window sentinel {v:?}")))
                }
            }
        }
        deserializer.deserialize_any(Visitor)
    }
}

/// Which detection rule produced an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMethod {
    ThresholdSustained,
    ChangepointBernoulli,
}

/// Parameters for the sustained-threshold rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Accuracy drop below baseline that counts as degraded.
    pub delta: f64,
    /// Consecutive degraded buckets required to end the window.
    pub k_sustain: usize,
    /// Leading buckets averaged into the baseline.
    pub baseline_buckets: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            delta: 0.05,
            k_sustain: 2,
            baseline_buckets: 2,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Validation(format!(
                "delta must lie in [0, 1], got {}",
                self.delta
            )));
        }
        if self.k_sustain == 0 {
            return Err(Error::Validation("k_sustain must be at least 1".into()));
        }
        if self.baseline_buckets == 0 {
            return Err(Error::Validation(
                "baseline_buckets must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-bucket trace of the effectiveness decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketDiagnostic {
    pub bucket_label: u64,
    pub upper_edge: u64,
    pub n: u64,
    pub accuracy: f64,
    pub degraded: bool,
}

/// A window estimate with everything needed to re-read it later:
/// method, its parameters, and the per-bucket trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MecwEstimate {
    pub mecw_tokens: MecwTokens,
    pub method: EstimationMethod,
    pub baseline_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_sustain: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_buckets: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likelihood_gain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_threshold: Option<f64>,
    pub diagnostics: Vec<BucketDiagnostic>,
}

/// Sustained-threshold window estimation over an ascending cleaned
/// bucket series.
///
/// Baseline = mean accuracy of the first `baseline_buckets` buckets; a
/// bucket is degraded iff its accuracy is below `baseline − delta`; the
/// window ends at the upper edge of the last bucket before the first
/// run of `k_sustain` consecutive degraded buckets. No such run means
/// the window extends at least to the end of the tested range.
pub fn estimate_mecw(buckets: &[BucketStat], config: &EstimatorConfig) -> Result<MecwEstimate> {
    config.validate()?;
    require_ascending(buckets)?;
    if buckets.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "window estimation needs at least 2 cleaned buckets, got {}",
            buckets.len()
        )));
    }

    let head = config.baseline_buckets.min(buckets.len());
    let baseline_accuracy =
        buckets[..head].iter().map(|b| b.accuracy).sum::<f64>() / head as f64;
    let floor = baseline_accuracy - config.delta;

    let degraded: Vec<bool> = buckets.iter().map(|b| b.accuracy < floor).collect();
    let run_start = (0..buckets.len().saturating_sub(config.k_sustain - 1))
        .find(|&i| degraded[i..i + config.k_sustain].iter().all(|&d| d));

    let mecw_tokens = match run_start {
        // A run starting at the very first bucket leaves no effective
        // prefix: the window ends where testing began.
        Some(0) => MecwTokens::Finite(buckets[0].bucket_label),
        Some(i) => MecwTokens::Finite(buckets[i - 1].upper_edge()),
        None => MecwTokens::AtOrAboveMaxTested,
    };

    Ok(MecwEstimate {
        mecw_tokens,
        method: EstimationMethod::ThresholdSustained,
        baseline_accuracy,
        delta: Some(config.delta),
        k_sustain: Some(config.k_sustain),
        baseline_buckets: Some(head),
        likelihood_gain: None,
        gain_threshold: None,
        diagnostics: buckets
            .iter()
            .zip(&degraded)
            .map(|(b, &d)| diagnostic(b, d))
            .collect(),
    })
}

/// Likelihood gain (nats) below which a change point is considered
/// noise rather than a regime shift. A gain of 2 corresponds to an
/// e² ≈ 7.4× likelihood ratio in favor of the two-segment model.
pub const CHANGEPOINT_GAIN_THRESHOLD: f64 = 2.0;

/// Best two-segment Bernoulli split of a bucket series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Changepoint {
    /// First bucket index of the second segment.
    pub cut_index: usize,
    /// Log-likelihood improvement of the two-segment model over one
    /// segment, in nats.
    pub gain: f64,
    pub reliable: bool,
}

/// Maximizes the two-segment Bernoulli log-likelihood over all cut
/// positions. Ties resolve to the earliest cut.
pub fn changepoint_bernoulli(buckets: &[BucketStat]) -> Result<Changepoint> {
    require_ascending(buckets)?;
    if buckets.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "change-point search needs at least 2 buckets, got {}",
            buckets.len()
        )));
    }

    // Prefix sums of trials and successes for O(1) segment likelihoods.
    let mut cum_n = vec![0u64; buckets.len() + 1];
    let mut cum_k = vec![0u64; buckets.len() + 1];
    for (i, b) in buckets.iter().enumerate() {
        cum_n[i + 1] = cum_n[i] + b.n;
        cum_k[i + 1] = cum_k[i] + b.k;
    }
    let segment_ll = |lo: usize, hi: usize| -> f64 {
        let n = (cum_n[hi] - cum_n[lo]) as f64;
        let k = (cum_k[hi] - cum_k[lo]) as f64;
        let mut ll = 0.0;
        if k > 0.0 {
            ll += k * (k / n).ln();
        }
        if n - k > 0.0 {
            ll += (n - k) * ((n - k) / n).ln();
        }
        ll
    };

    let single = segment_ll(0, buckets.len());
    let (mut best_cut, mut best_ll) = (1, f64::NEG_INFINITY);
    for cut in 1..buckets.len() {
        let ll = segment_ll(0, cut) + segment_ll(cut, buckets.len());
        if ll > best_ll {
            best_ll = ll;
            best_cut = cut;
        }
    }
    let gain = best_ll - single;
    Ok(Changepoint {
        cut_index: best_cut,
        gain,
        reliable: gain > CHANGEPOINT_GAIN_THRESHOLD,
    })
}

/// Window estimate from the change-point rule: the window ends at the
/// upper edge of the last pre-cut bucket. An unreliable cut (gain at or
/// below the threshold) reports the series as not yet degraded.
pub fn estimate_mecw_changepoint(buckets: &[BucketStat]) -> Result<MecwEstimate> {
    let cp = changepoint_bernoulli(buckets)?;
    let pre_n: u64 = buckets[..cp.cut_index].iter().map(|b| b.n).sum();
    let pre_k: u64 = buckets[..cp.cut_index].iter().map(|b| b.k).sum();
    let baseline_accuracy = pre_k as f64 / pre_n as f64;

    let mecw_tokens = if cp.reliable {
        MecwTokens::Finite(buckets[cp.cut_index - 1].upper_edge())
    } else {
        MecwTokens::AtOrAboveMaxTested
    };

    Ok(MecwEstimate {
        mecw_tokens,
        method: EstimationMethod::ChangepointBernoulli,
        baseline_accuracy,
        delta: None,
        k_sustain: None,
        baseline_buckets: None,
        likelihood_gain: Some(cp.gain),
        gain_threshold: Some(CHANGEPOINT_GAIN_THRESHOLD),
        diagnostics: buckets
            .iter()
            .enumerate()
            .map(|(i, b)| diagnostic(b, cp.reliable && i >= cp.cut_index))
            .collect(),
    })
}

/// Success probability of a chain of `n_agents` agents that each
/// succeed independently with probability `per_agent_success`: pⁿ.
pub fn cascade_success(per_agent_success: f64, n_agents: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&per_agent_success) {
        return Err(Error::Validation(format!(
            "per-agent success must lie in [0, 1], got {per_agent_success}"
        )));
    }
    if n_agents == 0 {
        return Err(Error::Validation("agent count must be at least 1".into()));
    }
    Ok(per_agent_success.powi(n_agents as i32))
}

/// One model's standing for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub model_id: String,
    pub mecw_tokens: MecwTokens,
    /// Baseline accuracy of the estimate, used as the tie-breaker.
    pub accuracy_at_reference_size: f64,
}

/// Models ordered by effective window for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTaskRanking {
    pub task: TaskType,
    pub entries: Vec<RankedModel>,
}

/// Orders models descending by window size, ties broken by reference
/// accuracy (descending) then model id (ascending). The
/// `at_or_above_max_tested` sentinel outranks every finite window.
pub fn rank_models(task: TaskType, mut entries: Vec<RankedModel>) -> Result<ModelTaskRanking> {
    if entries.is_empty() {
        return Err(Error::Validation(
            "ranking needs at least one model estimate".into(),
        ));
    }
    entries.sort_by(|a, b| {
        b.mecw_tokens
            .cmp(&a.mecw_tokens)
            .then_with(|| {
                b.accuracy_at_reference_size
                    .total_cmp(&a.accuracy_at_reference_size)
            })
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
    Ok(ModelTaskRanking { task, entries })
}

fn diagnostic(bucket: &BucketStat, degraded: bool) -> BucketDiagnostic {
    BucketDiagnostic {
        bucket_label: bucket.bucket_label,
        upper_edge: bucket.upper_edge(),
        n: bucket.n,
        accuracy: bucket.accuracy,
        degraded,
    }
}

fn require_ascending(buckets: &[BucketStat]) -> Result<()> {
    if buckets.windows(2).any(|w| w[0].bucket_label >= w[1].bucket_label) {
        return Err(Error::Validation(
            "bucket series must be ascending by label".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Whole-run analysis
// ---------------------------------------------------------------------------

/// Options controlling [`analyze_run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Overrides the per-task default bucket widths when set.
    pub bucket_width: Option<u64>,
    /// Null accuracy for the per-bucket binomial test.
    pub p0: f64,
    pub estimator: EstimatorConfig,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            bucket_width: None,
            p0: 0.5,
            estimator: EstimatorConfig::default(),
        }
    }
}

/// Default bucket widths: coarse for the single-fact lookup (its
/// accuracy moves slowly with context), fine for the aggregation tasks.
pub fn default_bucket_width(task: TaskType) -> u64 {
    match task {
        TaskType::Needle => 5000,
        TaskType::Needles | TaskType::Summary | TaskType::Sorted => 100,
    }
}

/// Everything derived for one (model, task) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAnalysis {
    pub model_id: String,
    pub task: TaskType,
    pub bucket_width: u64,
    pub trial_count: u64,
    /// Cleaned buckets (n ≥ 3), ascending.
    pub buckets: Vec<BucketStat>,
    /// Buckets dropped by the hygiene rule, kept for audit.
    pub removed_buckets: Vec<BucketStat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<CorrelationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mecw_threshold: Option<MecwEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mecw_changepoint: Option<MecwEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate_note: Option<String>,
}

/// The stored output of the analyze stage; reports render this and
/// nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisBundle {
    pub schema_version: u32,
    pub run_id: String,
    pub p0: f64,
    pub estimator: EstimatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket_width_override: Option<u64>,
    pub groups: Vec<GroupAnalysis>,
    /// Per-task rankings by the default (threshold) estimate.
    pub rankings: Vec<ModelTaskRanking>,
}

/// Buckets, cleans, tests and estimates every (model, task) group of a
/// stored run, in the model/task order of the run's plan.
pub fn analyze_run(store: &Store, run_id: &str, options: &AnalysisOptions) -> Result<AnalysisBundle> {
    options.estimator.validate()?;
    if !(options.p0 > 0.0 && options.p0 < 1.0) {
        return Err(Error::Validation(format!(
            "p0 must lie strictly inside (0, 1), got {}",
            options.p0
        )));
    }

    let manifest = store.load_manifest(run_id)?;
    let trials = store
        .load_trials(run_id, &crate::store::TrialFilter::default(), crate::store::LoadMode::Strict)?
        .trials;

    let mut groups = Vec::new();
    for endpoint in &manifest.plan.endpoints {
        for &task in &manifest.plan.tasks {
            let points: Vec<TrialPoint> = trials
                .iter()
                .filter(|t| t.model_id == endpoint.model_id && t.task == task)
                .map(|t| TrialPoint {
                    tokens: t.input_tokens.tokens,
                    correct: t.grade.correct,
                })
                .collect();
            if points.is_empty() {
                continue;
            }
            let width = options.bucket_width.unwrap_or_else(|| default_bucket_width(task));
            let cleaned = stats::clean_buckets(stats::bucketize(&points, width, options.p0)?);

            let (correlation, correlation_note) = match stats::point_biserial(&points) {
                Ok(c) => (Some(c), None),
                Err(Error::DegenerateInput(msg)) => (None, Some(msg)),
                Err(other) => return Err(other),
            };

            let (mecw_threshold, mecw_changepoint, estimate_note) =
                match estimate_mecw(&cleaned.kept, &options.estimator) {
                    Ok(threshold) => {
                        let changepoint = estimate_mecw_changepoint(&cleaned.kept)?;
                        (Some(threshold), Some(changepoint), None)
                    }
                    Err(Error::InsufficientData(msg)) => (None, None, Some(msg)),
                    Err(other) => return Err(other),
                };

            groups.push(GroupAnalysis {
                model_id: endpoint.model_id.clone(),
                task,
                bucket_width: width,
                trial_count: points.len() as u64,
                buckets: cleaned.kept,
                removed_buckets: cleaned.removed,
                correlation,
                correlation_note,
                mecw_threshold,
                mecw_changepoint,
                estimate_note,
            });
        }
    }

    let mut rankings = Vec::new();
    for &task in &manifest.plan.tasks {
        let entries: Vec<RankedModel> = groups
            .iter()
            .filter(|g| g.task == task)
            .filter_map(|g| {
                g.mecw_threshold.as_ref().map(|est| RankedModel {
                    model_id: g.model_id.clone(),
                    mecw_tokens: est.mecw_tokens,
                    accuracy_at_reference_size: est.baseline_accuracy,
                })
            })
            .collect();
        if !entries.is_empty() {
            rankings.push(rank_models(task, entries)?);
        }
    }

    Ok(AnalysisBundle {
        schema_version: 1,
        run_id: run_id.to_string(),
        p0: options.p0,
        estimator: options.estimator,
        bucket_width_override: options.bucket_width,
        groups,
        rankings,
    })
}
