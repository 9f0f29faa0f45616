//! Experiment orchestration: plans, prompt assembly, and the sweep
//! loop that asks every (endpoint, task, row count, trial) cell its
//! question and persists one graded trial per cell.
//!
//! Reproducibility contract: everything random in a trial — which rows
//! are sampled, which question is asked, how the rows are shuffled,
//! and (in simulation) whether the model answers correctly — is drawn
//! from a single stream keyed by (sweep seed, model id, task, dataset
//! seed, row count, trial index). Wall-clock time and scheduling order
//! never touch the stream, so interrupted runs resume exactly and
//! simulated runs are bytewise repeatable.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lexicon::Lexicons;
use crate::modelio::{
    count_tokens, simulate_complete, CompletionResult, DegradationProfile, LiveClient,
    ModelEndpoint, RetryPolicy, TokenCount, TransportStatus,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::store::{CompletionRecord, RunManifest, Store, TrialFilter};
use crate::synthgen::{generate_dataset, sample_without_replacement, Dataset, FactRow};
use crate::tasks::{grade, make_question, GradeResult, QuestionInstance, TaskType};

pub const DEFAULT_ROW_LADDER: [u64; 11] = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000];
pub const DEFAULT_TRIALS_PER_SIZE: u64 = 25;
pub const DEFAULT_DATASET_SIZE: u64 = 10_000;
pub const DEFAULT_DATASET_SEED: u64 = 42;
pub const DEFAULT_SWEEP_SEED: u64 = 7;
/// Raw responses are stored verbatim up to this many bytes; longer
/// ones are cut at a character boundary and flagged.
pub const MAX_STORED_RESPONSE_BYTES: usize = 64 * 1024;

// ---------------------------------------------------------------------------
// Plan
// ---------------------------------------------------------------------------

/// Accuracy profiles for simulated endpoints: one default, optionally
/// overridden per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub default_profile: DegradationProfile,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_task: BTreeMap<TaskType, DegradationProfile>,
}

impl SimulationConfig {
    pub fn profile_for(&self, task: TaskType) -> &DegradationProfile {
        self.per_task.get(&task).unwrap_or(&self.default_profile)
    }

    pub fn validate(&self) -> Result<()> {
        self.default_profile.validate()?;
        for profile in self.per_task.values() {
            profile.validate()?;
        }
        Ok(())
    }
}

/// A complete, serializable description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub endpoints: Vec<ModelEndpoint>,
    #[serde(default = "all_tasks")]
    pub tasks: Vec<TaskType>,
    #[serde(default = "default_row_counts")]
    pub row_counts: Vec<u64>,
    #[serde(default = "default_trials_per_size")]
    pub trials_per_size: u64,
    #[serde(default = "default_dataset_seed")]
    pub dataset_seed: u64,
    #[serde(default = "default_sweep_seed")]
    pub sweep_seed: u64,
    /// Rows in the generated corpus that trials sample from.
    #[serde(default = "default_dataset_size")]
    pub dataset_size: u64,
    /// `"default"` for the built-in prompt template, or a file path.
    #[serde(default = "default_template_ref")]
    pub prompt_template: String,
    /// `None` for the built-in lexicon, or a file path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationConfig>,
    /// Fixes the run id instead of deriving one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

fn all_tasks() -> Vec<TaskType> {
    TaskType::ALL.to_vec()
}

fn default_row_counts() -> Vec<u64> {
    DEFAULT_ROW_LADDER.to_vec()
}

fn default_trials_per_size() -> u64 {
    DEFAULT_TRIALS_PER_SIZE
}

fn default_dataset_seed() -> u64 {
    DEFAULT_DATASET_SEED
}

fn default_sweep_seed() -> u64 {
    DEFAULT_SWEEP_SEED
}

fn default_dataset_size() -> u64 {
    DEFAULT_DATASET_SIZE
}

fn default_template_ref() -> String {
    "default".to_string()
}

impl SweepPlan {
    /// A plan with full-scale defaults (complete ladder, 25 trials per
    /// size, all tasks) around the given endpoints.
    pub fn default_plan(endpoints: Vec<ModelEndpoint>) -> SweepPlan {
        SweepPlan {
            endpoints,
            tasks: all_tasks(),
            row_counts: default_row_counts(),
            trials_per_size: DEFAULT_TRIALS_PER_SIZE,
            dataset_seed: DEFAULT_DATASET_SEED,
            sweep_seed: DEFAULT_SWEEP_SEED,
            dataset_size: DEFAULT_DATASET_SIZE,
            prompt_template: default_template_ref(),
            lexicon: None,
            simulation: None,
            run_id: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let plan: SweepPlan = toml::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.endpoints.is_empty() {
            return Err(Error::Config("plan declares no endpoints".into()));
        }
        let mut ids = HashSet::new();
        for ep in &self.endpoints {
            ep.validate()?;
            if !ids.insert(ep.model_id.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate endpoint model_id {:?}",
                    ep.model_id
                )));
            }
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("plan declares no tasks".into()));
        }
        let mut seen_tasks = HashSet::new();
        for &task in &self.tasks {
            if !seen_tasks.insert(task) {
                return Err(Error::Config(format!("duplicate task {task}")));
            }
        }
        if self.row_counts.is_empty() {
            return Err(Error::Config("plan declares no row counts".into()));
        }
        if self.row_counts[0] == 0 {
            return Err(Error::Config("row counts must be positive".into()));
        }
        if self.row_counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "row counts must be strictly increasing".into(),
            ));
        }
        if self.trials_per_size == 0 {
            return Err(Error::Config("trials_per_size must be at least 1".into()));
        }
        let max_rows = *self.row_counts.last().expect("nonempty");
        if max_rows > self.dataset_size {
            return Err(Error::Config(format!(
                "largest row count {max_rows} exceeds dataset_size {}",
                self.dataset_size
            )));
        }
        if let Some(sim) = &self.simulation {
            sim.validate()?;
        }
        if self.endpoints.iter().any(|e| e.is_simulated()) && self.simulation.is_none() {
            return Err(Error::Config(
                "plan has simulated endpoints but no [simulation] profile".into(),
            ));
        }
        if let Some(run_id) = &self.run_id {
            crate::store::validate_run_id(run_id)?;
        }
        Ok(())
    }

    pub fn is_fully_simulated(&self) -> bool {
        self.endpoints.iter().all(|e| e.is_simulated())
    }

    pub fn planned_trials(&self) -> u64 {
        self.endpoints.len() as u64
            * self.tasks.len() as u64
            * self.row_counts.len() as u64
            * self.trials_per_size
    }

    /// Canonical JSON used for fingerprinting; field order is fixed by
    /// the struct, map keys are ordered.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// First 8 hex chars of the SHA-256 of the canonical plan.
    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(hex::encode(&digest[..4]))
    }
}

// ---------------------------------------------------------------------------
// Prompt template
// ---------------------------------------------------------------------------

pub const DEFAULT_PROMPT_TEMPLATE_TOML: &str =
    include_str!("../assets/default_prompt_template.toml");

/// Versioned instruction wording; its hash is recorded in every run
/// manifest so wording changes are visible in artifacts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: u32,
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn builtin() -> Self {
        Self::from_toml_str(DEFAULT_PROMPT_TEMPLATE_TOML)
            .expect("built-in prompt template must be valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let template: PromptTemplate = toml::from_str(text)?;
        template.validate()?;
        Ok(template)
    }

    /// `"default"` resolves to the built-in template, anything else is
    /// read as a file path.
    pub fn resolve(reference: &str) -> Result<Self> {
        if reference == "default" {
            Ok(Self::builtin())
        } else {
            Self::from_toml_str(&std::fs::read_to_string(reference)?)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Config(format!(
                "unsupported prompt template version {}",
                self.version
            )));
        }
        let combined = format!("{}{}", self.system, self.user);
        for placeholder in ["{rows}", "{question}"] {
            if !combined.contains(placeholder) {
                return Err(Error::Config(format!(
                    "prompt template never uses the {placeholder} placeholder"
                )));
            }
        }
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("template serializes");
        format!("sha256:{}", hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}

/// A fully rendered prompt: the system and user messages as sent, and
/// their concatenation, which is what gets hashed and token-counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltPrompt {
    pub system: String,
    pub user: String,
    pub full_text: String,
}

/// Shuffles the rows uniformly with the given stream and substitutes
/// them (one sentence per line) plus the question into the template.
pub fn build_prompt(
    template: &PromptTemplate,
    rows: &[FactRow],
    question_text: &str,
    rng: &mut impl Rng,
) -> BuiltPrompt {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(rng);
    let mut rows_text = String::new();
    for (i, &idx) in order.iter().enumerate() {
        if i > 0 {
            rows_text.push('\n');
        }
        rows_text.push_str(&rows[idx].sentence);
    }
    let render = |part: &str| {
        part.replace("{rows}", &rows_text)
            .replace("{question}", question_text)
    };
    let system = render(&template.system);
    let user = render(&template.user);
    let full_text = format!("{system}\n\n{user}");
    BuiltPrompt {
        system,
        user,
        full_text,
    }
}

pub fn prompt_hash(prompt_text: &str) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(prompt_text.as_bytes())))
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// One graded question asked of one model at one context size. The
/// unit of persistence: one JSON line in a run's trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub run_id: String,
    pub model_id: String,
    pub task: TaskType,
    pub row_count: u64,
    pub trial_index: u64,
    /// Reconstructs the trial's whole random stream (row sample,
    /// question draw, shuffle, simulated verdict).
    pub trial_seed: u64,
    pub prompt_text: String,
    /// `sha256:<hex>` of `prompt_text` exactly as sent.
    pub prompt_hash: String,
    pub input_tokens: TokenCount,
    pub question: QuestionInstance,
    pub raw_response: String,
    pub response_truncated: bool,
    pub grade: GradeResult,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens_reported: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens_reported: Option<u64>,
    /// RFC 3339 UTC; `None` in simulation so runs are bytewise stable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    /// Unknown fields from newer writers survive a read-modify-write.
    #[serde(flatten, default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// A cell that produced no trial, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub run_id: String,
    pub model_id: String,
    pub task: TaskType,
    pub row_count: u64,
    pub trial_index: u64,
    pub trial_seed: u64,
    pub transport_status: TransportStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occurred_at: Option<String>,
}

/// Coordinates identifying one trial slot.
pub type CellKey = (String, TaskType, u64, u64);

// ---------------------------------------------------------------------------
// Trial preparation (shared by live, simulated, and test paths)
// ---------------------------------------------------------------------------

/// Everything about a trial that is fixed before the model answers.
pub struct PreparedTrial {
    pub trial_seed: u64,
    pub rows: Vec<FactRow>,
    pub question: QuestionInstance,
    pub prompt: BuiltPrompt,
    /// The trial stream, positioned after the shuffle draw; simulation
    /// continues it for the correctness draw.
    pub rng: rand_chacha::ChaCha12Rng,
}

/// Deterministically prepares the trial at the given coordinates:
/// derives the trial seed, samples `row_count` distinct rows, draws
/// the question, and renders the shuffled prompt.
pub fn prepare_trial(
    plan: &SweepPlan,
    dataset: &Dataset,
    template: &PromptTemplate,
    model_id: &str,
    task: TaskType,
    row_count: u64,
    trial_index: u64,
) -> Result<PreparedTrial> {
    let trial_seed = derive_seed(
        plan.sweep_seed,
        "sweep.trial",
        &[model_id, task.as_str()],
        &[plan.dataset_seed, row_count, trial_index],
    );
    let mut rng = rng_from_seed(trial_seed);
    if row_count as usize > dataset.rows.len() {
        return Err(Error::Validation(format!(
            "cannot sample {row_count} rows from a {}-row dataset",
            dataset.rows.len()
        )));
    }
    let indices = sample_without_replacement(dataset.rows.len(), row_count as usize, &mut rng);
    let rows: Vec<FactRow> = indices.iter().map(|&i| dataset.rows[i].clone()).collect();
    let question = make_question(task, &rows, &mut rng)?;
    let prompt = build_prompt(template, &rows, &question.question_text, &mut rng);
    Ok(PreparedTrial {
        trial_seed,
        rows,
        question,
        prompt,
        rng,
    })
}

/// Cuts a stored response at the byte budget (on a char boundary) and
/// reports whether anything was dropped.
pub fn truncate_response(text: &str) -> (String, bool) {
    if text.len() <= MAX_STORED_RESPONSE_BYTES {
        return (text.to_string(), false);
    }
    let mut cut = MAX_STORED_RESPONSE_BYTES;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    (text[..cut].to_string(), true)
}

// ---------------------------------------------------------------------------
// Sweep execution
// ---------------------------------------------------------------------------

/// Runs a validated plan to completion, creating a fresh run in the
/// store. Returns the run id.
///
/// Credentials for every live endpoint are checked before any dataset
/// generation or network use. Endpoint trouble never aborts the run:
/// trials that exhaust their retries are logged as failures, and a
/// fatal endpoint failure writes skip records for that endpoint's
/// remaining cells so planned = persisted + logged always holds.
pub fn run_sweep(plan: &SweepPlan, store: &Store) -> Result<String> {
    plan.validate()?;
    check_credentials(plan)?;

    let lexicons = load_lexicons(plan)?;
    let template = PromptTemplate::resolve(&plan.prompt_template)?;
    let fully_simulated = plan.is_fully_simulated();

    let run_id = match &plan.run_id {
        Some(id) => id.clone(),
        // Simulated runs get a deterministic id so identical plans
        // collide loudly instead of multiplying; live runs get a
        // timestamped one.
        None if fully_simulated => format!("sim-{:016x}-{}", plan.sweep_seed, plan.fingerprint()?),
        None => format!(
            "{}-{}",
            chrono::Utc::now().format("%Y%m%dT%H%M%SZ"),
            plan.fingerprint()?
        ),
    };

    let manifest = RunManifest {
        schema_version: 1,
        run_id: run_id.clone(),
        created_at: if fully_simulated {
            None
        } else {
            Some(chrono::Utc::now().to_rfc3339())
        },
        harness_version: env!("CARGO_PKG_VERSION").to_string(),
        lexicon_hash: lexicons.content_hash(),
        prompt_template_hash: template.content_hash(),
        planned_trials: plan.planned_trials(),
        plan: plan.clone(),
        extra: serde_json::Map::new(),
    };
    store.create_run(&manifest)?;
    execute_missing(store, &manifest, &HashSet::new())?;
    write_completion(store, &manifest)?;
    Ok(run_id)
}

/// Completes the missing cells of an interrupted run. A trailing
/// partial trial line (a write cut off mid-record) is discarded first;
/// interior corruption is an error. Already-persisted cells are never
/// recomputed, so a resumed simulated run is bytewise identical to an
/// uninterrupted one.
pub fn resume_sweep(store: &Store, run_id: &str) -> Result<String> {
    let manifest = store.load_manifest(run_id)?;
    manifest.plan.validate()?;
    check_credentials(&manifest.plan)?;
    if let Some(dropped) = store.repair_trailing_partial(run_id)? {
        log::warn!("run {run_id}: dropped a {dropped}-byte partial trailing record before resuming");
    }
    let existing = store
        .load_trials(run_id, &TrialFilter::default(), crate::store::LoadMode::Strict)?
        .trials;
    let done: HashSet<CellKey> = existing
        .iter()
        .map(|t| (t.model_id.clone(), t.task, t.row_count, t.trial_index))
        .collect();
    execute_missing(store, &manifest, &done)?;
    write_completion(store, &manifest)?;
    Ok(run_id.to_string())
}

/// Fails fast (before any generation or network work) if a live
/// endpoint names a credential variable that is not set. The value is
/// read again at request time and never stored anywhere.
fn check_credentials(plan: &SweepPlan) -> Result<()> {
    for ep in &plan.endpoints {
        if ep.is_simulated() {
            continue;
        }
        if let Some(var) = &ep.auth_env_var {
            if std::env::var(var).is_err() {
                return Err(Error::MissingCredential {
                    env_var: var.clone(),
                });
            }
        }
    }
    Ok(())
}

fn load_lexicons(plan: &SweepPlan) -> Result<Lexicons> {
    match plan.lexicon.as_deref() {
        None | Some("default") => Ok(Lexicons::builtin()),
        Some(path) => Lexicons::from_path(std::path::Path::new(path)),
    }
}

/// Executes every planned cell not in `done`, in canonical
/// endpoint → task → row count → trial order, appending trials and
/// failure records as it goes.
fn execute_missing(store: &Store, manifest: &RunManifest, done: &HashSet<CellKey>) -> Result<()> {
    let plan = &manifest.plan;
    let run_id = &manifest.run_id;
    let lexicons = load_lexicons(plan)?;
    let template = PromptTemplate::resolve(&plan.prompt_template)?;
    let dataset = generate_dataset(plan.dataset_size as usize, plan.dataset_seed, &lexicons)?;

    let needs_live = plan.endpoints.iter().any(|e| !e.is_simulated());
    let client = if needs_live {
        Some(LiveClient::new(RetryPolicy::default())?)
    } else {
        None
    };

    let mut trials = store.trial_writer(run_id)?;
    let mut failures = store.failure_writer(run_id)?;

    for endpoint in &plan.endpoints {
        // After a fatal failure the endpoint is disabled; the reason is
        // recorded on every remaining cell so the books balance.
        let mut fatal_reason: Option<String> = None;
        for &task in &plan.tasks {
            for &row_count in &plan.row_counts {
                let mut pending: Vec<u64> = (0..plan.trials_per_size)
                    .filter(|&ti| {
                        !done.contains(&(endpoint.model_id.clone(), task, row_count, ti))
                    })
                    .collect();

                if let Some(reason) = &fatal_reason {
                    for ti in pending.drain(..) {
                        let seed = trial_seed_for(plan, &endpoint.model_id, task, row_count, ti);
                        failures.append(&skip_record(
                            run_id, endpoint, task, row_count, ti, seed, reason,
                        ))?;
                    }
                    continue;
                }

                if endpoint.is_simulated() {
                    let sim = plan
                        .simulation
                        .as_ref()
                        .expect("validated: simulated endpoints have profiles");
                    let profile = sim.profile_for(task);
                    for ti in pending {
                        let mut prepared = prepare_trial(
                            plan, &dataset, &template, &endpoint.model_id, task, row_count, ti,
                        )?;
                        let input_tokens = count_tokens(&prepared.prompt.full_text, None);
                        let result = simulate_complete(
                            profile,
                            &prepared.question,
                            input_tokens.tokens,
                            &mut prepared.rng,
                        );
                        trials.append(&finish_trial(
                            run_id, endpoint, task, row_count, ti, prepared, result, None, None,
                        ))?;
                    }
                    continue;
                }

                let client = client.as_ref().expect("live endpoints have a client");
                for chunk in pending.chunks(endpoint.max_concurrency.max(1)) {
                    let outcomes = run_live_chunk(
                        client, plan, &dataset, &template, endpoint, task, row_count, chunk,
                    );
                    for (ti, outcome) in chunk.iter().copied().zip(outcomes) {
                        let (prepared, started_at, result) = outcome?;
                        let finished_at = chrono::Utc::now().to_rfc3339();
                        match result.transport_status {
                            TransportStatus::Ok => {
                                trials.append(&finish_trial(
                                    run_id,
                                    endpoint,
                                    task,
                                    row_count,
                                    ti,
                                    prepared,
                                    result,
                                    Some(started_at),
                                    Some(finished_at),
                                ))?;
                            }
                            status => {
                                failures.append(&FailureRecord {
                                    run_id: run_id.clone(),
                                    model_id: endpoint.model_id.clone(),
                                    task,
                                    row_count,
                                    trial_index: ti,
                                    trial_seed: prepared.trial_seed,
                                    transport_status: status,
                                    detail: result.status_detail.clone(),
                                    occurred_at: Some(finished_at),
                                })?;
                                if status == TransportStatus::FatalFailure {
                                    let reason = result
                                        .status_detail
                                        .unwrap_or_else(|| "fatal transport failure".into());
                                    log::error!(
                                        "endpoint {} disabled: {reason}",
                                        endpoint.model_id
                                    );
                                    fatal_reason = Some(reason);
                                }
                            }
                        }
                    }
                    if fatal_reason.is_some() {
                        break;
                    }
                }
            }
        }
    }
    trials.sync()?;
    failures.sync()?;
    Ok(())
}

/// Sends one chunk of trials concurrently (bounded by the per-endpoint
/// limit). Preparation and transport happen in worker threads; results
/// come back in chunk order so persistence stays single-writer and
/// ordered.
#[allow(clippy::too_many_arguments)]
fn run_live_chunk(
    client: &LiveClient,
    plan: &SweepPlan,
    dataset: &Dataset,
    template: &PromptTemplate,
    endpoint: &ModelEndpoint,
    task: TaskType,
    row_count: u64,
    chunk: &[u64],
) -> Vec<Result<(PreparedTrial, String, CompletionResult)>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunk
            .iter()
            .map(|&ti| {
                scope.spawn(move || {
                    let prepared = prepare_trial(
                        plan, dataset, template, &endpoint.model_id, task, row_count, ti,
                    )?;
                    let started_at = chrono::Utc::now().to_rfc3339();
                    let result =
                        client.complete(endpoint, &prepared.prompt.system, &prepared.prompt.user)?;
                    Ok((prepared, started_at, result))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("trial worker panicked"))
            .collect()
    })
}

fn trial_seed_for(
    plan: &SweepPlan,
    model_id: &str,
    task: TaskType,
    row_count: u64,
    trial_index: u64,
) -> u64 {
    derive_seed(
        plan.sweep_seed,
        "sweep.trial",
        &[model_id, task.as_str()],
        &[plan.dataset_seed, row_count, trial_index],
    )
}

fn skip_record(
    run_id: &str,
    endpoint: &ModelEndpoint,
    task: TaskType,
    row_count: u64,
    trial_index: u64,
    trial_seed: u64,
    reason: &str,
) -> FailureRecord {
    FailureRecord {
        run_id: run_id.to_string(),
        model_id: endpoint.model_id.clone(),
        task,
        row_count,
        trial_index,
        trial_seed,
        transport_status: TransportStatus::FatalFailure,
        detail: Some(format!("skipped: endpoint disabled after fatal failure: {reason}")),
        occurred_at: None,
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_trial(
    run_id: &str,
    endpoint: &ModelEndpoint,
    task: TaskType,
    row_count: u64,
    trial_index: u64,
    prepared: PreparedTrial,
    result: CompletionResult,
    started_at: Option<String>,
    finished_at: Option<String>,
) -> Trial {
    let (raw_response, response_truncated) = truncate_response(&result.text);
    // Grade exactly what is stored, so re-grading the archive
    // reproduces the verdict.
    let grade = grade(&raw_response, &prepared.question.expected);
    let input_tokens = count_tokens(&prepared.prompt.full_text, result.prompt_tokens_reported);
    Trial {
        run_id: run_id.to_string(),
        model_id: endpoint.model_id.clone(),
        task,
        row_count,
        trial_index,
        trial_seed: prepared.trial_seed,
        prompt_hash: prompt_hash(&prepared.prompt.full_text),
        prompt_text: prepared.prompt.full_text,
        input_tokens,
        question: prepared.question,
        raw_response,
        response_truncated,
        grade,
        latency_ms: result.latency_ms,
        prompt_tokens_reported: result.prompt_tokens_reported,
        completion_tokens_reported: result.completion_tokens_reported,
        started_at,
        finished_at,
        extra: serde_json::Map::new(),
    }
}

fn write_completion(store: &Store, manifest: &RunManifest) -> Result<()> {
    let (completed_trials, failed_trials) = store.record_counts(&manifest.run_id)?;
    store.write_completion(
        &manifest.run_id,
        &CompletionRecord {
            finished_at: if manifest.plan.is_fully_simulated() {
                None
            } else {
                Some(chrono::Utc::now().to_rfc3339())
            },
            completed_trials,
            failed_trials,
        },
    )
}

/// Renders a human-readable one-line summary of a plan, used by the
/// CLI before launching.
pub fn describe_plan(plan: &SweepPlan) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{} endpoint(s) x {} task(s) x {} size(s) x {} trial(s) = {} planned trials",
        plan.endpoints.len(),
        plan.tasks.len(),
        plan.row_counts.len(),
        plan.trials_per_size,
        plan.planned_trials()
    );
    s
}
