//! Command-line interface: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 user error (bad flags, invalid config,
//! missing credentials, missing runs), 2 internal error. Run-producing
//! subcommands (`sweep`, `resume`, `simulate`) print the run id as the
//! last line of stdout so scripts can chain stages.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::estimator::{analyze_run, AnalysisOptions, EstimatorConfig, GroupAnalysis, MecwEstimate};
use crate::lexicon::Lexicons;
use crate::modelio::{DegradationProfile, EndpointSet, ModelEndpoint};
use crate::report::emit_reports;
use crate::store::Store;
use crate::sweep::{
    describe_plan, resume_sweep, run_sweep, PromptTemplate, SimulationConfig, SweepPlan,
};
use crate::synthgen::generate_dataset;
use crate::tasks::TaskType;

const DEFAULT_SIM_PROFILE: &str = "t0=1500,w=100,ph=0.98,pl=0.05";

/// Measure how much context a model can actually use, per problem
/// type.
#[derive(Debug, Parser)]
#[command(
    name = "mecw",
    version,
    about = "Measure a model's maximum effective context window (MECW) per problem type",
    long_about = "Generates seeded synthetic fact rows, sweeps context sizes against live \
                  chat-completions endpoints or a deterministic simulated model, grades answers \
                  against exact oracles, and estimates where accuracy starts to degrade."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic fact-row corpus as JSON lines.
    GenData(GenDataArgs),
    /// Run the sweep described by a plan file.
    Sweep(SweepArgs),
    /// Complete the missing trials of an interrupted run.
    Resume(ResumeArgs),
    /// Bucket, test, and estimate effective windows for a stored run.
    Analyze(AnalyzeArgs),
    /// Print the stored window estimates of an analyzed run.
    Mecw(MecwArgs),
    /// Render report artifacts from a stored analysis.
    Report(ReportArgs),
    /// Offline one-shot: simulated sweep, then analyze, then report.
    Simulate(SimulateArgs),
    /// Parse and validate config files without running anything.
    ValidateConfig(ValidateConfigArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of fact rows to generate.
    #[arg(long, default_value_t = 10_000)]
    pub n: u64,
    /// Dataset seed; the same seed and lexicon give identical rows.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Lexicon TOML file; omit for the built-in lexicon.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Output file; one JSON row object per line.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep plan TOML file.
    #[arg(long)]
    pub plan: PathBuf,
    /// Endpoint TOML file; its [[endpoints]] replace the plan's.
    #[arg(long)]
    pub endpoint_config: Option<PathBuf>,
    /// Overrides the plan's sweep seed (trial randomness).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run store directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ResumeArgs {
    /// Run id to resume.
    #[arg(long)]
    pub run: String,
    /// Run store directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Run id to analyze.
    #[arg(long)]
    pub run: String,
    /// Run store directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Token bucket width for every task (default: 5000 for needle,
    /// 100 for the others).
    #[arg(long)]
    pub bucket_width: Option<u64>,
    /// Accuracy drop below baseline that counts as degraded.
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Consecutive degraded buckets required to end the window.
    #[arg(long, default_value_t = 2)]
    pub k_sustain: usize,
    /// Leading buckets averaged into the baseline.
    #[arg(long, default_value_t = 2)]
    pub baseline_buckets: usize,
    /// Null-hypothesis accuracy for the per-bucket binomial test.
    #[arg(long, default_value_t = 0.5)]
    pub p0: f64,
}

#[derive(Debug, Args)]
pub struct MecwArgs {
    /// Run id to read estimates from.
    #[arg(long)]
    pub run: String,
    /// Run store directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Restrict output to one task (needle, needles, summary, sorted).
    #[arg(long)]
    pub task: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run id to render reports for.
    #[arg(long)]
    pub run: String,
    /// Run store directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Degradation profile "t0=..,w=..,ph=..,pl=.." for the simulated
    /// model (default: t0=1500,w=100,ph=0.98,pl=0.05).
    #[arg(long, visible_alias = "simulate-profile", value_name = "PROFILE")]
    pub profile: Option<String>,
    /// Per-task profile override, e.g. "sorted=t0=800,w=50,ph=0.95,pl=0.05".
    /// Repeat for several tasks.
    #[arg(long = "task-profile", value_name = "TASK=PROFILE", action = ArgAction::Append)]
    pub task_profiles: Vec<String>,
    /// Plan TOML file, or "default" for the built-in offline plan.
    #[arg(long, default_value = "default")]
    pub plan: String,
    /// Overrides the plan's sweep seed (trial randomness).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run store directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Token bucket width for every task (default: 5000 for needle,
    /// 100 for the others).
    #[arg(long)]
    pub bucket_width: Option<u64>,
    /// Accuracy drop below baseline that counts as degraded.
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Consecutive degraded buckets required to end the window.
    #[arg(long, default_value_t = 2)]
    pub k_sustain: usize,
    /// Leading buckets averaged into the baseline.
    #[arg(long, default_value_t = 2)]
    pub baseline_buckets: usize,
    /// Null-hypothesis accuracy for the per-bucket binomial test.
    #[arg(long, default_value_t = 0.5)]
    pub p0: f64,
}

#[derive(Debug, Args)]
pub struct ValidateConfigArgs {
    /// Sweep plan TOML file to validate.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Endpoint TOML file to validate.
    #[arg(long)]
    pub endpoint_config: Option<PathBuf>,
    /// Lexicon TOML file to validate.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Prompt template TOML file to validate.
    #[arg(long)]
    pub prompt_template: Option<PathBuf>,
}

/// Parses argv, dispatches, and maps the outcome to an exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let rendered = e.to_string();
                    let first = rendered
                        .lines()
                        .find(|l| !l.trim().is_empty())
                        .unwrap_or("invalid arguments");
                    eprintln!("{}", first.trim());
                    1
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            if code == 2 {
                eprintln!("internal error: {e} (set RUST_LOG=debug for a full trace)");
            } else {
                eprintln!("error: {e}");
            }
            code
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::Sweep(args) => sweep(args),
        Command::Resume(args) => resume(args),
        Command::Analyze(args) => analyze(args),
        Command::Mecw(args) => mecw(args),
        Command::Report(args) => report(args),
        Command::Simulate(args) => simulate(args),
        Command::ValidateConfig(args) => validate_config(args),
    }
}

fn load_lexicon(path: &Option<PathBuf>) -> Result<Lexicons> {
    match path {
        Some(p) => Lexicons::from_path(p),
        None => Ok(Lexicons::builtin()),
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let lexicons = load_lexicon(&args.lexicon)?;
    let dataset = generate_dataset(args.n as usize, args.seed, &lexicons)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut text = String::new();
    for row in &dataset.rows {
        text.push_str(&serde_json::to_string(row)?);
        text.push('\n');
    }
    std::fs::write(&args.out, text)?;
    println!(
        "wrote {} rows (seed {}, lexicon {}) to {}",
        dataset.rows.len(),
        args.seed,
        lexicons.content_hash(),
        args.out.display()
    );
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut plan = SweepPlan::from_path(&args.plan)?;
    if let Some(config) = &args.endpoint_config {
        plan.endpoints = EndpointSet::from_path(config)?.endpoints;
    }
    if let Some(seed) = args.seed {
        plan.sweep_seed = seed;
    }
    plan.validate()?;
    let store = Store::new(&args.out);
    println!("{}", describe_plan(&plan));
    let run_id = run_sweep(&plan, &store)?;
    println!("{run_id}");
    Ok(())
}

fn resume(args: ResumeArgs) -> Result<()> {
    let store = Store::new(&args.out);
    let run_id = resume_sweep(&store, &args.run)?;
    println!("{run_id}");
    Ok(())
}

fn analysis_options(
    bucket_width: Option<u64>,
    p0: f64,
    delta: f64,
    k_sustain: usize,
    baseline_buckets: usize,
) -> AnalysisOptions {
    AnalysisOptions {
        bucket_width,
        p0,
        estimator: EstimatorConfig {
            delta,
            k_sustain,
            baseline_buckets,
        },
    }
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let store = Store::new(&args.out);
    let options = analysis_options(
        args.bucket_width,
        args.p0,
        args.delta,
        args.k_sustain,
        args.baseline_buckets,
    );
    let bundle = analyze_run(&store, &args.run, &options)?;
    store.write_analysis(&args.run, &bundle)?;
    println!(
        "analyzed {} (model, task) group(s) over {} ranking(s); stored under {}",
        bundle.groups.len(),
        bundle.rankings.len(),
        store.run_dir(&args.run).join("analysis").display()
    );
    Ok(())
}

fn mecw(args: MecwArgs) -> Result<()> {
    let task_filter = args
        .task
        .as_deref()
        .map(TaskType::from_str)
        .transpose()?;
    let store = Store::new(&args.out);
    let bundle = store.load_analysis(&args.run)?;
    let mut printed = 0;
    println!(
        "{:<24} {:<8} {:<22} {:<22} {:>12}",
        "model", "task", "method", "mecw_tokens", "baseline"
    );
    for group in &bundle.groups {
        if let Some(task) = task_filter {
            if group.task != task {
                continue;
            }
        }
        for est in [&group.mecw_threshold, &group.mecw_changepoint]
            .into_iter()
            .flatten()
        {
            println!("{}", estimate_line(group, est));
            printed += 1;
        }
        if let Some(note) = &group.estimate_note {
            println!(
                "{:<24} {:<8} (no estimate: {note})",
                group.model_id,
                group.task.as_str()
            );
        }
    }
    if printed == 0 {
        println!("(no stored estimates matched)");
    }
    Ok(())
}

fn estimate_line(group: &GroupAnalysis, est: &MecwEstimate) -> String {
    let method = match est.method {
        crate::estimator::EstimationMethod::ThresholdSustained => "threshold_sustained",
        crate::estimator::EstimationMethod::ChangepointBernoulli => "changepoint_bernoulli",
    };
    format!(
        "{:<24} {:<8} {:<22} {:<22} {:>12.6}",
        group.model_id,
        group.task.as_str(),
        method,
        est.mecw_tokens.to_string(),
        est.baseline_accuracy
    )
}

fn report(args: ReportArgs) -> Result<()> {
    let store = Store::new(&args.out);
    let written = emit_reports(&store, &args.run)?;
    println!(
        "wrote {} report artifact(s) to {}",
        written.len(),
        store.reports_dir(&args.run).display()
    );
    Ok(())
}

fn parse_task_profiles(
    entries: &[String],
) -> Result<std::collections::BTreeMap<TaskType, DegradationProfile>> {
    let mut map = std::collections::BTreeMap::new();
    for entry in entries {
        let (task_str, profile_str) = entry.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "task profile {entry:?} is not TASK=PROFILE (e.g. sorted=t0=800,w=50,ph=0.95,pl=0.05)"
            ))
        })?;
        let task = TaskType::from_str(task_str.trim())?;
        let profile: DegradationProfile = profile_str.parse()?;
        if map.insert(task, profile).is_some() {
            return Err(Error::Config(format!(
                "task {task} has more than one profile override"
            )));
        }
    }
    Ok(map)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let explicit_profile = args
        .profile
        .as_deref()
        .map(DegradationProfile::from_str)
        .transpose()?;
    let per_task = parse_task_profiles(&args.task_profiles)?;

    let mut plan = if args.plan == "default" {
        let mut plan = SweepPlan::default_plan(vec![ModelEndpoint {
            model_id: "sim-model".to_string(),
            base_url: "sim:".to_string(),
            auth_env_var: None,
            request_shape: Default::default(),
            max_output_tokens: None,
            timeout_secs: 120,
            max_concurrency: 1,
        }]);
        plan.simulation = Some(SimulationConfig {
            default_profile: DEFAULT_SIM_PROFILE.parse().expect("default profile parses"),
            per_task: Default::default(),
        });
        plan
    } else {
        SweepPlan::from_path(std::path::Path::new(&args.plan))?
    };

    // Flag-provided profiles override whatever the plan carries.
    {
        let sim = plan.simulation.get_or_insert_with(|| SimulationConfig {
            default_profile: DEFAULT_SIM_PROFILE.parse().expect("default profile parses"),
            per_task: Default::default(),
        });
        if let Some(profile) = explicit_profile {
            sim.default_profile = profile;
        }
        for (task, profile) in per_task {
            sim.per_task.insert(task, profile);
        }
    }
    if let Some(seed) = args.seed {
        plan.sweep_seed = seed;
    }
    if !plan.is_fully_simulated() {
        return Err(Error::Config(
            "simulate requires a fully simulated plan (every endpoint base_url starting with \"sim:\")"
                .into(),
        ));
    }
    plan.validate()?;

    let store = Store::new(&args.out);
    println!("{}", describe_plan(&plan));
    let run_id = run_sweep(&plan, &store)?;

    let options = analysis_options(
        args.bucket_width,
        args.p0,
        args.delta,
        args.k_sustain,
        args.baseline_buckets,
    );
    let bundle = analyze_run(&store, &run_id, &options)?;
    store.write_analysis(&run_id, &bundle)?;
    let written = emit_reports(&store, &run_id)?;
    println!(
        "analyzed {} group(s); wrote {} report artifact(s) to {}",
        bundle.groups.len(),
        written.len(),
        store.reports_dir(&run_id).display()
    );
    println!("{run_id}");
    Ok(())
}

fn validate_config(args: ValidateConfigArgs) -> Result<()> {
    let mut checked = 0;
    if let Some(path) = &args.plan {
        let plan = SweepPlan::from_path(path)?;
        println!(
            "OK plan {}: {}",
            path.display(),
            describe_plan(&plan)
        );
        checked += 1;
    }
    if let Some(path) = &args.endpoint_config {
        let set = EndpointSet::from_path(path)?;
        println!(
            "OK endpoints {}: {} endpoint(s)",
            path.display(),
            set.endpoints.len()
        );
        checked += 1;
    }
    if let Some(path) = &args.lexicon {
        let lex = Lexicons::from_path(path)?;
        println!(
            "OK lexicon {}: {} first names x {} last names, hash {}",
            path.display(),
            lex.first_names.len(),
            lex.last_names.len(),
            lex.content_hash()
        );
        checked += 1;
    }
    if let Some(path) = &args.prompt_template {
        let template = PromptTemplate::from_toml_str(&std::fs::read_to_string(path)?)?;
        println!(
            "OK prompt template {}: version {}, hash {}",
            path.display(),
            template.version,
            template.content_hash()
        );
        checked += 1;
    }
    if checked == 0 {
        return Err(Error::Config(
            "nothing to validate: pass at least one of --plan, --endpoint-config, --lexicon, --prompt-template"
                .into(),
        ));
    }
    Ok(())
}
