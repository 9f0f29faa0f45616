//! Rendering stored analysis into human- and plot-friendly artifacts.
//!
//! Reports are a pure function of a run's stored analysis bundle plus
//! its manifest: no number is recomputed here, only formatted. Every
//! artifact is UTF-8 with a trailing newline, and re-emitting over an
//! existing report directory is bytewise idempotent.
//!
//! Layout under `<run>/reports/`:
//!
//! ```text
//! manifest.json                    verbatim copy of the run manifest
//! mecw_summary.txt                 window estimates per (model, task), with method parameters
//! bucket_table_<model>_<task>.csv  cleaned buckets: n, k, accuracy, log10_p
//! accuracy_curve_<model>_<task>.csv  plot data: (bucket label, accuracy, n)
//! pvalue_matrix_<task>.csv         bucket labels x models, log10_p in scientific notation
//! rankings_<task>.csv              models ordered by estimated window
//! NOTICE.txt                       only when the run has nothing to report
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::estimator::{AnalysisBundle, GroupAnalysis, MecwEstimate};
use crate::store::Store;
use crate::tasks::TaskType;

/// Renders every report artifact for an analyzed run and returns the
/// paths written.
pub fn emit_reports(store: &Store, run_id: &str) -> Result<Vec<PathBuf>> {
    let bundle = store.load_analysis(run_id)?;
    let manifest_text = fs::read_to_string(store.run_dir(run_id).join("manifest.json"))
        .map_err(|_| Error::MissingArtifact(format!("run {run_id} has no manifest.json")))?;

    let dir = store.reports_dir(run_id);
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let mut emit = |name: String, content: String| -> Result<()> {
        debug_assert!(content.ends_with('\n'), "artifact {name} lacks trailing newline");
        let path = dir.join(name);
        fs::write(&path, content)?;
        written.push(path);
        Ok(())
    };

    emit("manifest.json".into(), manifest_text)?;

    if bundle.groups.is_empty() {
        emit(
            "NOTICE.txt".into(),
            format!(
                "Run {run_id} has no analyzed (model, task) groups; nothing to report.\n\
                 Re-run the analyze stage after the sweep has produced trials.\n"
            ),
        )?;
        return Ok(written);
    }

    for group in &bundle.groups {
        let stem = format!(
            "{}_{}",
            sanitize_component(&group.model_id),
            group.task.as_str()
        );
        emit(format!("bucket_table_{stem}.csv"), bucket_table_csv(group))?;
        emit(
            format!("accuracy_curve_{stem}.csv"),
            accuracy_curve_csv(group),
        )?;
    }

    let mut tasks_seen = Vec::new();
    for group in &bundle.groups {
        if !tasks_seen.contains(&group.task) {
            tasks_seen.push(group.task);
        }
    }
    for task in tasks_seen {
        emit(
            format!("pvalue_matrix_{}.csv", task.as_str()),
            pvalue_matrix_csv(&bundle, task),
        )?;
    }
    for ranking in &bundle.rankings {
        emit(
            format!("rankings_{}.csv", ranking.task.as_str()),
            rankings_csv(ranking),
        )?;
    }

    emit("mecw_summary.txt".into(), mecw_summary(&bundle))?;
    Ok(written)
}

fn bucket_table_csv(group: &GroupAnalysis) -> String {
    let mut out = String::from("bucket_label,n,k,accuracy,log10_p,test_id\n");
    for b in &group.buckets {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            b.bucket_label,
            b.n,
            b.k,
            format_accuracy(b.accuracy),
            format_log10_p(b.log10_p),
            test_id_str(b.test_id),
        );
    }
    out
}

fn accuracy_curve_csv(group: &GroupAnalysis) -> String {
    let mut out = String::from("bucket_label,accuracy,n\n");
    for b in &group.buckets {
        let _ = writeln!(out, "{},{},{}", b.bucket_label, format_accuracy(b.accuracy), b.n);
    }
    out
}

/// Bucket labels as rows (ascending), model ids as columns (sorted),
/// log10_p in scientific notation; blank where a model has no cleaned
/// bucket at that label.
fn pvalue_matrix_csv(bundle: &AnalysisBundle, task: TaskType) -> String {
    let groups: Vec<&GroupAnalysis> =
        bundle.groups.iter().filter(|g| g.task == task).collect();
    let mut models: Vec<&str> = groups.iter().map(|g| g.model_id.as_str()).collect();
    models.sort_unstable();
    models.dedup();

    let mut cells: BTreeMap<(u64, &str), f64> = BTreeMap::new();
    let mut labels: BTreeSet<u64> = BTreeSet::new();
    for g in &groups {
        for b in &g.buckets {
            labels.insert(b.bucket_label);
            cells.insert((b.bucket_label, g.model_id.as_str()), b.log10_p);
        }
    }

    let mut out = String::from("bucket_label");
    for m in &models {
        let _ = write!(out, ",{m}");
    }
    out.push('\n');
    for label in labels {
        let _ = write!(out, "{label}");
        for m in &models {
            match cells.get(&(label, *m)) {
                Some(lp) => {
                    let _ = write!(out, ",{}", format_log10_p(*lp));
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

fn rankings_csv(ranking: &crate::estimator::ModelTaskRanking) -> String {
    let mut out = String::from("rank,model_id,mecw_tokens,accuracy_at_reference_size\n");
    for (i, entry) in ranking.entries.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            i + 1,
            entry.model_id,
            entry.mecw_tokens,
            format_accuracy(entry.accuracy_at_reference_size),
        );
    }
    out
}

fn mecw_summary(bundle: &AnalysisBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Effective context window summary for run {}", bundle.run_id);
    let _ = writeln!(
        out,
        "p0={} delta={} k_sustain={} baseline_buckets={}{}",
        bundle.p0,
        bundle.estimator.delta,
        bundle.estimator.k_sustain,
        bundle.estimator.baseline_buckets,
        match bundle.bucket_width_override {
            Some(w) => format!(" bucket_width_override={w}"),
            None => String::new(),
        }
    );
    out.push('\n');
    let _ = writeln!(
        out,
        "{:<24} {:<8} {:<22} {:<22} {:>12}  parameters",
        "model", "task", "method", "mecw_tokens", "baseline"
    );
    for g in &bundle.groups {
        match (&g.mecw_threshold, &g.mecw_changepoint) {
            (Some(t), Some(c)) => {
                let _ = writeln!(out, "{}", summary_line(g, t));
                let _ = writeln!(out, "{}", summary_line(g, c));
            }
            _ => {
                let _ = writeln!(
                    out,
                    "{:<24} {:<8} {}",
                    g.model_id,
                    g.task.as_str(),
                    g.estimate_note.as_deref().unwrap_or("no estimate"),
                );
            }
        }
        match (&g.correlation, &g.correlation_note) {
            (Some(c), _) => {
                let _ = writeln!(
                    out,
                    "{:<24} {:<8} {:<22} r_pb={} df={} log10_p={}",
                    "", "", "point_biserial_t", format_accuracy(c.r_pb), c.df,
                    format_log10_p(c.log10_p),
                );
            }
            (None, Some(note)) => {
                let _ = writeln!(out, "{:<24} {:<8} correlation skipped: {note}", "", "");
            }
            (None, None) => {}
        }
    }
    out
}

fn summary_line(g: &GroupAnalysis, est: &MecwEstimate) -> String {
    let mut params = Vec::new();
    if let Some(d) = est.delta {
        params.push(format!("delta={d}"));
    }
    if let Some(k) = est.k_sustain {
        params.push(format!("k_sustain={k}"));
    }
    if let Some(b) = est.baseline_buckets {
        params.push(format!("baseline_buckets={b}"));
    }
    if let Some(gain) = est.likelihood_gain {
        params.push(format!("gain={gain:.2}"));
    }
    if let Some(thr) = est.gain_threshold {
        params.push(format!("gain_threshold={thr:.2}"));
    }
    format!(
        "{:<24} {:<8} {:<22} {:<22} {:>12}  {}",
        g.model_id,
        g.task.as_str(),
        method_str(est),
        est.mecw_tokens.to_string(),
        format_accuracy(est.baseline_accuracy),
        params.join(","),
    )
}

fn method_str(est: &MecwEstimate) -> &'static str {
    match est.method {
        crate::estimator::EstimationMethod::ThresholdSustained => "threshold_sustained",
        crate::estimator::EstimationMethod::ChangepointBernoulli => "changepoint_bernoulli",
    }
}

fn test_id_str(id: crate::stats::TestId) -> &'static str {
    match id {
        crate::stats::TestId::PointBiserialT => "point_biserial_t",
        crate::stats::TestId::BinomialVsNull => "binomial_vs_null",
    }
}

fn format_accuracy(value: f64) -> String {
    format!("{value:.6}")
}

/// Renders a base-10 log p-value as the p-value itself in scientific
/// notation, exact even when p underflows f64 (e.g. −243.392 →
/// `4.06E-244`).
pub fn format_log10_p(lp: f64) -> String {
    if lp == f64::NEG_INFINITY {
        return "0.00E+00".to_string();
    }
    if lp >= 0.0 || lp.is_nan() {
        // p clamps at 1 (and NaN is reported as the null's certainty).
        return "1.00E+00".to_string();
    }
    let mut exponent = lp.floor() as i64;
    let mut mantissa = 10f64.powf(lp - exponent as f64);
    // Two-decimal rounding can carry the mantissa to 10.00.
    if (mantissa * 100.0).round() >= 1000.0 {
        mantissa = 1.0;
        exponent += 1;
    }
    let sign = if exponent < 0 { '-' } else { '+' };
    format!("{mantissa:.2}E{sign}{:02}", exponent.abs())
}

/// Replaces filesystem-hostile characters in a model id for use in
/// artifact file names.
fn sanitize_component(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{
        AnalysisBundle, EstimationMethod, EstimatorConfig, MecwEstimate, MecwTokens,
        ModelTaskRanking, RankedModel,
    };
    use crate::stats::{BucketStat, TestId};

    fn bucket(label: u64, n: u64, k: u64, lp: f64) -> BucketStat {
        BucketStat {
            bucket_label: label,
            width: 100,
            n,
            k,
            accuracy: k as f64 / n as f64,
            log10_p: lp,
            test_id: TestId::BinomialVsNull,
        }
    }

    fn estimate(tokens: MecwTokens) -> MecwEstimate {
        MecwEstimate {
            mecw_tokens: tokens,
            method: EstimationMethod::ThresholdSustained,
            baseline_accuracy: 0.95,
            delta: Some(0.05),
            k_sustain: Some(2),
            baseline_buckets: Some(2),
            likelihood_gain: None,
            gain_threshold: None,
            diagnostics: vec![],
        }
    }

    fn group(model: &str, buckets: Vec<BucketStat>) -> GroupAnalysis {
        GroupAnalysis {
            model_id: model.into(),
            task: TaskType::Needles,
            bucket_width: 100,
            trial_count: buckets.iter().map(|b| b.n).sum(),
            buckets,
            removed_buckets: vec![],
            correlation: None,
            correlation_note: Some("degenerate".into()),
            mecw_threshold: Some(estimate(MecwTokens::Finite(200))),
            mecw_changepoint: None,
            estimate_note: None,
        }
    }

    fn bundle(groups: Vec<GroupAnalysis>) -> AnalysisBundle {
        AnalysisBundle {
            schema_version: 1,
            run_id: "run-r".into(),
            p0: 0.5,
            estimator: EstimatorConfig::default(),
            bucket_width_override: None,
            groups,
            rankings: vec![ModelTaskRanking {
                task: TaskType::Needles,
                entries: vec![RankedModel {
                    model_id: "alpha".into(),
                    mecw_tokens: MecwTokens::Finite(200),
                    accuracy_at_reference_size: 0.95,
                }],
            }],
        }
    }

    #[test]
    fn scientific_notation_survives_deep_underflow() {
        // 10^0.608 ≈ 4.055, placed 244 decades down: the f64 p-value
        // would be exactly 0, but the rendering must not be.
        let lp = 4.05f64.log10() - 244.0;
        assert_eq!(format_log10_p(lp), "4.05E-244");
        assert_eq!(format_log10_p(-3000.0), "1.00E-3000");
    }

    #[test]
    fn scientific_notation_pins_ordinary_values() {
        assert_eq!(format_log10_p(0.5f64.log10()), "5.00E-01");
        assert_eq!(format_log10_p(0.05f64.log10()), "5.00E-02");
        // 2 * 0.5^10 = 0.001953125.
        assert_eq!(format_log10_p(0.001953125f64.log10()), "1.95E-03");
        assert_eq!(format_log10_p(0.0), "1.00E+00");
        assert_eq!(format_log10_p(f64::NEG_INFINITY), "0.00E+00");
    }

    #[test]
    fn mantissa_carry_rounds_to_the_next_decade() {
        // 9.999 → 10.00 after 2-decimal rounding → 1.00 one decade up.
        let lp = 9.999f64.log10() - 5.0;
        assert_eq!(format_log10_p(lp), "1.00E-04");
    }

    #[test]
    fn emitted_reports_are_bytewise_idempotent_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path().join("runs"));
        let mut plan = crate::sweep::SweepPlan::default_plan(vec![crate::modelio::ModelEndpoint {
            model_id: "alpha".into(),
            base_url: "sim:".into(),
            auth_env_var: None,
            request_shape: Default::default(),
            max_output_tokens: None,
            timeout_secs: 120,
            max_concurrency: 1,
        }]);
        plan.simulation = Some(crate::sweep::SimulationConfig {
            default_profile: "t0=100,w=10,ph=1,pl=0".parse().unwrap(),
            per_task: Default::default(),
        });
        store
            .create_run(&crate::store::RunManifest {
                schema_version: 1,
                run_id: "run-r".into(),
                created_at: None,
                harness_version: "test".into(),
                lexicon_hash: "sha256:l".into(),
                prompt_template_hash: "sha256:t".into(),
                planned_trials: 0,
                plan,
                extra: Default::default(),
            })
            .unwrap();

        let b = bundle(vec![
            group("alpha", vec![bucket(100, 25, 24, -5.9), bucket(200, 25, 20, -2.1)]),
            group("beta/odd id", vec![bucket(200, 25, 10, -0.4), bucket(300, 25, 9, -0.3)]),
        ]);
        store.write_analysis("run-r", &b).unwrap();

        let first = emit_reports(&store, "run-r").unwrap();
        let snapshot: Vec<(PathBuf, Vec<u8>)> = first
            .iter()
            .map(|p| (p.clone(), fs::read(p).unwrap()))
            .collect();
        let second = emit_reports(&store, "run-r").unwrap();
        assert_eq!(first, second);
        for (path, bytes) in snapshot {
            assert_eq!(fs::read(&path).unwrap(), bytes, "{path:?} changed on re-emit");
        }

        let names: Vec<String> = first
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert!(names.contains(&"manifest.json".to_string()));
        assert!(names.contains(&"bucket_table_alpha_needles.csv".to_string()));
        assert!(names.contains(&"bucket_table_beta_odd_id_needles.csv".to_string()));
        assert!(names.contains(&"accuracy_curve_alpha_needles.csv".to_string()));
        assert!(names.contains(&"pvalue_matrix_needles.csv".to_string()));
        assert!(names.contains(&"rankings_needles.csv".to_string()));
        assert!(names.contains(&"mecw_summary.txt".to_string()));

        for path in &first {
            let text = fs::read_to_string(path).unwrap();
            assert!(text.ends_with('\n'), "{path:?} missing trailing newline");
        }
    }

    #[test]
    fn matrix_leaves_blanks_where_a_model_lacks_a_bucket() {
        let b = bundle(vec![
            group("alpha", vec![bucket(100, 25, 24, -5.9), bucket(200, 25, 20, -2.1)]),
            group("beta", vec![bucket(200, 25, 10, -0.4)]),
        ]);
        let csv = pvalue_matrix_csv(&b, TaskType::Needles);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bucket_label,alpha,beta");
        assert!(lines[1].starts_with("100,"));
        assert!(
            lines[1].ends_with(','),
            "beta has no bucket 100, cell must be blank: {}",
            lines[1]
        );
        assert_eq!(lines[2].split(',').count(), 3);
        assert!(!lines[2].ends_with(','), "beta has bucket 200: {}", lines[2]);
    }

    #[test]
    fn bucket_table_rows_mirror_the_stats() {
        let g = group("alpha", vec![bucket(100, 25, 24, -5.9)]);
        let csv = bucket_table_csv(&g);
        assert_eq!(
            csv,
            "bucket_label,n,k,accuracy,log10_p,test_id\n\
             100,25,24,0.960000,1.26E-06,binomial_vs_null\n"
        );
    }

    #[test]
    fn unanalyzed_run_is_a_clear_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path().join("runs"));
        let err = emit_reports(&store, "nope").unwrap_err();
        assert!(err.to_string().contains("analyze") || err.to_string().contains("analysis"));
    }

    #[test]
    fn empty_groups_produce_a_notice() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path().join("runs"));
        let mut plan = crate::sweep::SweepPlan::default_plan(vec![crate::modelio::ModelEndpoint {
            model_id: "alpha".into(),
            base_url: "sim:".into(),
            auth_env_var: None,
            request_shape: Default::default(),
            max_output_tokens: None,
            timeout_secs: 120,
            max_concurrency: 1,
        }]);
        plan.simulation = Some(crate::sweep::SimulationConfig {
            default_profile: "t0=100,w=10,ph=1,pl=0".parse().unwrap(),
            per_task: Default::default(),
        });
        store
            .create_run(&crate::store::RunManifest {
                schema_version: 1,
                run_id: "run-e".into(),
                created_at: None,
                harness_version: "test".into(),
                lexicon_hash: "sha256:l".into(),
                prompt_template_hash: "sha256:t".into(),
                planned_trials: 0,
                plan,
                extra: Default::default(),
            })
            .unwrap();
        let mut b = bundle(vec![]);
        b.run_id = "run-e".into();
        b.rankings.clear();
        store.write_analysis("run-e", &b).unwrap();
        let files = emit_reports(&store, "run-e").unwrap();
        let names: Vec<String> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert!(names.contains(&"NOTICE.txt".to_string()));
        assert!(!names.iter().any(|n| n.starts_with("bucket_table")));
    }
}
