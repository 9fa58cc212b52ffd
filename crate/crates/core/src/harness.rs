//! End-to-end experiment runner.
//!
//! [`run_experiment`] loads a (source, target) pair, filters it, samples
//! users, builds tasks and evaluates every prompt variant against the
//! configured provider. A run directory receives:
//!
//! - `tasks.jsonl`: the task set shared by all variants
//! - `report.csv` and `report.md`: aggregated metrics
//! - `manifest.json`: config snapshot, digests, per-user ledger, counts
//! - `cache/`: one file per completion, so interrupted runs resume for free
//!
//! [`report`] recomputes the reports of a finished run from its directory,
//! serving every completion from the cache.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, CorpusError, DomainDataset, SyntheticSpec};
use crate::evaluation::{self, EvalError, MetricReport, MetricVector, MismatchStats, UserOutcome};
use crate::filtering::{self, CohortUser, CrossDomainCohort, FilterConfig, FilterError, FilterLog};
use crate::llm::{
    self, AnswerKey, CompletionRequest, Gateway, LlmError, Provider, ProviderConfig, ProviderKind, ReplayProvider,
};
use crate::parse::{self, MatchMode, ParseError, ParseRules, ParseStatus};
use crate::prompting::{
    self, Guidance, GuidanceCache, GuidanceRequest, PromptError, PromptFlags, PromptTemplates,
};
use crate::rng::{sha256_hex, substream};
use crate::taskgen::{self, CdrTask, SkippedUser, TaskGenConfig, TaskGenError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{} prompts missing from the replay store: {}", .0.len(), .0.join(", "))]
    ReplayMisses(Vec<String>),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let context = context.into();
    move |source| HarnessError::Io { context, source }
}

fn json_err(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> HarnessError {
    let context = context.into();
    move |source| HarnessError::Json { context, source }
}

/// Raw dump files for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainFiles {
    pub reviews: PathBuf,
    pub metadata: PathBuf,
    pub domain_id: String,
    /// Falls back to [`default_group`], then to `"ungrouped"`.
    #[serde(default)]
    pub group_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Files { source: DomainFiles, target: DomainFiles },
    /// JSON snapshots written by `ingest`.
    Snapshot { source: PathBuf, target: PathBuf },
    /// Generated corpus; `source` and `target` index its domains.
    Synthetic { spec: SyntheticSpec, source: usize, target: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub label: String,
    pub include_history: bool,
    pub include_guidance: bool,
    #[serde(default)]
    pub baseline: bool,
}

impl VariantSpec {
    pub fn flags(&self) -> PromptFlags {
        PromptFlags {
            include_history: self.include_history,
            include_guidance: self.include_guidance,
        }
    }
}

pub fn default_variants() -> Vec<VariantSpec> {
    vec![
        VariantSpec {
            label: "wo Info".into(),
            include_history: false,
            include_guidance: false,
            baseline: true,
        },
        VariantSpec {
            label: "w Info".into(),
            include_history: true,
            include_guidance: true,
            baseline: false,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSettings {
    pub max_chars: usize,
    pub templates_dir: Option<PathBuf>,
}

impl Default for PromptSettings {
    fn default() -> Self {
        Self {
            max_chars: 32_000,
            templates_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParseSettings {
    pub refusals_file: Option<PathBuf>,
    pub match_mode: MatchMode,
    pub fuzzy_threshold: f64,
}

impl Default for ParseSettings {
    fn default() -> Self {
        let rules = ParseRules::default();
        Self {
            refusals_file: None,
            match_mode: rules.match_mode,
            fuzzy_threshold: rules.fuzzy_threshold,
        }
    }
}

impl ParseSettings {
    pub fn rules(&self) -> Result<ParseRules> {
        let mut rules = ParseRules {
            match_mode: self.match_mode,
            fuzzy_threshold: self.fuzzy_threshold,
            ..ParseRules::default()
        };
        if let Some(path) = &self.refusals_file {
            rules = rules.with_refusals_file(path)?;
        }
        rules.validate()?;
        Ok(rules)
    }
}

/// Everything a run depends on. Serialized verbatim into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub filter: FilterConfig,
    /// `taskgen.rng_seed` is replaced by `seed` at run time.
    pub taskgen: TaskGenConfig,
    pub provider: ProviderConfig,
    /// Model used for guidance generation; defaults to `provider`.
    pub guidance_provider: Option<ProviderConfig>,
    pub variants: Vec<VariantSpec>,
    pub prompt: PromptSettings,
    pub parse: ParseSettings,
    /// Evaluate at most this many cohort users (all when `None`).
    pub max_users: Option<usize>,
    pub seed: u64,
    /// Worker threads; rayon's default when `None`.
    pub parallelism: Option<usize>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                spec: SyntheticSpec::new(200, 400, 2, 0),
                source: 0,
                target: 1,
            },
            filter: FilterConfig::default(),
            taskgen: TaskGenConfig::default(),
            provider: ProviderConfig::default(),
            guidance_provider: None,
            variants: default_variants(),
            prompt: PromptSettings::default(),
            parse: ParseSettings::default(),
            max_users: Some(100),
            seed: 0,
            parallelism: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        let config: Self = serde_json::from_str(&text).map_err(json_err(format!("parsing {}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn effective_taskgen(&self) -> TaskGenConfig {
        TaskGenConfig {
            rng_seed: self.seed,
            ..self.taskgen.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.effective_taskgen().validate()?;
        self.provider.validate()?;
        if let Some(g) = &self.guidance_provider {
            g.validate()?;
        }
        if self.filter.n_ground_truth != self.taskgen.n_ground_truth {
            return Err(HarnessError::Config(
                "filter.n_ground_truth and taskgen.n_ground_truth must agree".into(),
            ));
        }
        if self.variants.is_empty() {
            return Err(HarnessError::Config("at least one variant is required".into()));
        }
        if self.variants.iter().filter(|v| v.baseline).count() > 1 {
            return Err(HarnessError::Config("at most one variant can be the baseline".into()));
        }
        let mut labels: Vec<&str> = self.variants.iter().map(|v| v.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.variants.len() {
            return Err(HarnessError::Config("variant labels must be unique".into()));
        }
        if self.max_users == Some(0) || self.parallelism == Some(0) {
            return Err(HarnessError::Config("max_users and parallelism must be >= 1".into()));
        }
        if let DataSource::Synthetic { spec, source, target } = &self.data {
            spec.validate()?;
            if source == target || *source >= spec.n_domains || *target >= spec.n_domains {
                return Err(HarnessError::Config(format!(
                    "synthetic source/target must be distinct indices below {}",
                    spec.n_domains
                )));
            }
        }
        Ok(())
    }

    fn baseline_index(&self) -> usize {
        self.variants.iter().position(|v| v.baseline).unwrap_or(0)
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub provider: Option<ProviderKind>,
    pub model: Option<String>,
    pub endpoint: Option<String>,
    pub history_len: Option<usize>,
    pub candidate_size: Option<usize>,
    pub max_users: Option<usize>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(kind) = self.provider {
            config.provider.kind = kind;
        }
        if let Some(m) = &self.model {
            config.provider.model = Some(m.clone());
        }
        if let Some(e) = &self.endpoint {
            config.provider.endpoint = Some(e.clone());
        }
        if let Some(h) = self.history_len {
            config.taskgen.history_len = h;
        }
        if let Some(m) = self.candidate_size {
            config.taskgen.candidate_size = m;
        }
        if let Some(n) = self.max_users {
            config.max_users = Some(n);
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(p) = self.parallelism {
            config.parallelism = Some(p);
        }
        if let Some(o) = &self.output_dir {
            config.output_dir = o.clone();
        }
    }
}

/// Axes of a sweep; an empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixSpec {
    pub history_lens: Vec<usize>,
    pub candidate_sizes: Vec<usize>,
    pub guidance: Vec<bool>,
    pub providers: Vec<ProviderConfig>,
}

/// Cartesian product of `spec` over `base`. Each cell gets its own
/// subdirectory of `base.output_dir`, named after its label.
pub fn expand_matrix(base: &ExperimentConfig, spec: &MatrixSpec) -> Vec<(String, ExperimentConfig)> {
    fn axis<T: Clone>(values: &[T], default: T) -> Vec<T> {
        if values.is_empty() {
            vec![default]
        } else {
            values.to_vec()
        }
    }
    let guidance_default = base.variants.iter().any(|v| v.include_guidance);
    let mut cells = Vec::new();
    for h in axis(&spec.history_lens, base.taskgen.history_len) {
        for m in axis(&spec.candidate_sizes, base.taskgen.candidate_size) {
            for g in axis(&spec.guidance, guidance_default) {
                for p in axis(&spec.providers, base.provider.clone()) {
                    let label = format!("h{h}_m{m}_g{}_{}", u8::from(g), p.model_name());
                    let mut config = base.clone();
                    config.taskgen.history_len = h;
                    config.taskgen.candidate_size = m;
                    if !g {
                        for v in &mut config.variants {
                            v.include_guidance = false;
                        }
                    }
                    config.provider = p;
                    config.output_dir = base.output_dir.join(sanitize(&label));
                    cells.push((label, config));
                }
            }
        }
    }
    cells
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Group of the public Amazon review subsets used most often.
pub fn default_group(domain_id: &str) -> Option<&'static str> {
    match domain_id {
        "Movies & TV" | "Movies and TV" | "CD & Vinyl" | "CDs & Vinyl" | "CDs and Vinyl" | "Video Games" => {
            Some("Movies, Music & Games")
        }
        "Electronics" => Some("Electronics"),
        _ => None,
    }
}

pub fn domain_gap(source: &DomainDataset, target: &DomainDataset) -> &'static str {
    if source.group_id == target.group_id {
        "same-group"
    } else {
        "cross-group"
    }
}

/// Load reviews plus metadata for one domain.
pub fn ingest(files: &DomainFiles) -> Result<(DomainDataset, corpus::LoadStats, corpus::MetadataStats)> {
    let (reviews, load_stats) = corpus::load_reviews(&files.reviews, &files.domain_id)?;
    let (mut dataset, meta_stats) = corpus::load_metadata(&files.metadata, &reviews)?;
    dataset.group_id = files
        .group_id
        .clone()
        .or_else(|| default_group(&files.domain_id).map(str::to_string))
        .unwrap_or_else(|| "ungrouped".into());
    dataset.validate()?;
    Ok((dataset, load_stats, meta_stats))
}

pub fn read_snapshot(path: &Path) -> Result<DomainDataset> {
    let file = File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
    let dataset: DomainDataset =
        serde_json::from_reader(BufReader::new(file)).map_err(json_err(format!("parsing {}", path.display())))?;
    dataset.validate()?;
    Ok(dataset)
}

pub fn write_snapshot(dataset: &DomainDataset, path: &Path) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer(&mut *w, dataset).map_err(std::io::Error::other)
    })
}

pub fn load_datasets(source: &DataSource) -> Result<(DomainDataset, DomainDataset)> {
    match source {
        DataSource::Files { source, target } => Ok((ingest(source)?.0, ingest(target)?.0)),
        DataSource::Snapshot { source, target } => Ok((read_snapshot(source)?, read_snapshot(target)?)),
        DataSource::Synthetic { spec, source, target } => {
            let mut domains = corpus::generate_synthetic(spec)?;
            let mut take = |i: usize| {
                domains
                    .get_mut(i)
                    .map(|d| {
                        let empty = DomainDataset::new(d.domain_id.clone(), d.group_id.clone());
                        std::mem::replace(d, empty)
                    })
                    .ok_or_else(|| HarnessError::Config(format!("no synthetic domain {i}")))
            };
            let s = take(*source)?;
            let t = take(*target)?;
            Ok((s, t))
        }
    }
}

/// Up to `max` users drawn without replacement, returned in cohort order.
pub fn sample_users(cohort: &CrossDomainCohort, max: Option<usize>, seed: u64) -> Vec<&CohortUser> {
    let n = cohort.users.len();
    match max {
        Some(k) if k < n => {
            let mut rng = substream(seed, &["users"]);
            let mut picked = index::sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| &cohort.users[i]).collect()
        }
        _ => cohort.users.iter().collect(),
    }
}

/// Per-user fate within one variant. `sampled == ok + skipped + errored`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserLedger {
    pub sampled: usize,
    /// At least one repeat produced a scored ranking.
    pub ok: usize,
    /// No task could be built, or every completion was refused or empty.
    pub skipped: usize,
    /// The provider or prompt builder failed.
    pub errored: usize,
}

impl UserLedger {
    pub fn is_conserved(&self) -> bool {
        self.sampled == self.ok + self.skipped + self.errored
    }
}

/// Cohort, sampled users and tasks shared by every variant.
pub struct Prepared {
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub cohort: CrossDomainCohort,
    pub filter_log: FilterLog,
    pub n_sampled: usize,
    pub tasks: Vec<CdrTask>,
    pub skipped: Vec<SkippedUser>,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let (source, target) = load_datasets(&config.data)?;
    let (cohort, filter_log) = filtering::run_pipeline(&source, &target, &config.filter)?;
    let users = sample_users(&cohort, config.max_users, config.seed);
    let n_sampled = users.len();
    let (tasks, skipped) = taskgen::generate_tasks(&cohort, &users, &config.effective_taskgen())?;
    Ok(Prepared {
        source,
        target,
        cohort,
        filter_log,
        n_sampled,
        tasks,
        skipped,
    })
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    completions: usize,
    refusals: usize,
    empty: usize,
    missing: usize,
    presented: usize,
    hallucinated: usize,
    content_lines: usize,
    fixes: usize,
}

impl Tally {
    fn add(&mut self, o: &Tally) {
        self.completions += o.completions;
        self.refusals += o.refusals;
        self.empty += o.empty;
        self.missing += o.missing;
        self.presented += o.presented;
        self.hallucinated += o.hallucinated;
        self.content_lines += o.content_lines;
        self.fixes += o.fixes;
    }

    fn stats(&self) -> MismatchStats {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        MismatchStats {
            completions: self.completions,
            refusals: self.refusals,
            empty: self.empty,
            missing_rate: ratio(self.missing, self.presented),
            hallucination_rate: ratio(self.hallucinated, self.content_lines),
            format_fixes: self.fixes,
        }
    }
}

enum TaskResult {
    Scored(UserOutcome, Tally),
    Errored { replay_miss: Option<String> },
}

fn evaluate_task(
    task: &CdrTask,
    flags: PromptFlags,
    guidance: Option<&str>,
    gateway: &Gateway,
    ctx: &EvalContext,
) -> TaskResult {
    let mut per_repeat = Vec::with_capacity(task.shuffles.len());
    let mut tally = Tally::default();
    let gt_titles: Vec<String> = task.candidate_titles[..task.ground_truth.len()].to_vec();
    for r in 0..task.shuffles.len() {
        let bundle = match prompting::build_prompt(task, r, guidance, flags, &ctx.templates, ctx.max_chars) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("user {}: {e}", task.user_id);
                return TaskResult::Errored { replay_miss: None };
            }
        };
        let prompt = bundle.render();
        let presented = task.presented_titles(r);
        let key = AnswerKey {
            task_id: format!("{}#{r}", task.user_id),
            presented_titles: presented.iter().map(|t| t.to_string()).collect(),
            ground_truth_titles: gt_titles.clone(),
        };
        let completion = match gateway.complete(&CompletionRequest {
            prompt: &prompt,
            answer_key: Some(&key),
        }) {
            Ok(c) => c,
            Err(LlmError::ReplayMiss(hash)) => return TaskResult::Errored { replay_miss: Some(hash) },
            Err(e) => {
                log::warn!("user {}: {e}", task.user_id);
                return TaskResult::Errored { replay_miss: None };
            }
        };
        let (parsed, _) = parse::parse_completion(&completion.raw_text, &presented, &ctx.rules);
        tally.completions += 1;
        tally.fixes += parsed.n_format_fixes;
        match parsed.status {
            ParseStatus::Ok => {
                tally.missing += parsed.n_missing;
                tally.presented += parsed.n_candidates;
                tally.hallucinated += parsed.n_hallucinated;
                tally.content_lines += parsed.ranked.len() + parsed.n_hallucinated;
                let gt = task.presented_ground_truth(r);
                per_repeat.push(Some(MetricVector::compute(&parsed.ranked, &gt)));
            }
            ParseStatus::SkippedRefusal => {
                tally.refusals += 1;
                per_repeat.push(None);
            }
            ParseStatus::SkippedEmpty => {
                tally.empty += 1;
                per_repeat.push(None);
            }
        }
    }
    TaskResult::Scored(
        UserOutcome {
            user_id: task.user_id.clone(),
            per_repeat,
        },
        tally,
    )
}

struct EvalContext {
    templates: PromptTemplates,
    rules: ParseRules,
    max_chars: usize,
    guidance: Option<Guidance>,
}

/// Result of one variant over the task set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub report: MetricReport,
    pub ledger: UserLedger,
    pub outcomes: Vec<UserOutcome>,
    pub task_set_digest: String,
}

fn evaluate_variant(
    variant: &VariantSpec,
    prepared_tasks: &[CdrTask],
    n_sampled: usize,
    n_task_skipped: usize,
    gateway: &Gateway,
    ctx: &EvalContext,
    misses: &mut Vec<String>,
) -> Result<VariantResult> {
    let guidance = ctx.guidance.as_ref().map(|g| g.text.as_str());
    let results: Vec<TaskResult> = prepared_tasks
        .par_iter()
        .map(|t| evaluate_task(t, variant.flags(), guidance, gateway, ctx))
        .collect();
    let mut ledger = UserLedger {
        sampled: n_sampled,
        skipped: n_task_skipped,
        ..UserLedger::default()
    };
    let mut outcomes = Vec::new();
    let mut tally = Tally::default();
    for result in results {
        match result {
            TaskResult::Scored(outcome, t) => {
                tally.add(&t);
                if outcome.per_repeat.iter().any(Option::is_some) {
                    ledger.ok += 1;
                } else {
                    ledger.skipped += 1;
                }
                outcomes.push(outcome);
            }
            TaskResult::Errored { replay_miss } => {
                ledger.errored += 1;
                misses.extend(replay_miss);
            }
        }
    }
    debug_assert!(ledger.is_conserved());
    let mut report = evaluation::aggregate(&variant.label, &outcomes)?;
    report.mismatch = tally.stats();
    Ok(VariantResult {
        report,
        ledger,
        outcomes,
        task_set_digest: task_digest(prepared_tasks)?,
    })
}

fn task_digest(tasks: &[CdrTask]) -> Result<String> {
    let mut bytes = Vec::new();
    taskgen::write_tasks_jsonl(tasks, &mut bytes).map_err(io_err("serializing tasks"))?;
    Ok(sha256_hex(&bytes))
}

fn dataset_digest(dataset: &DomainDataset) -> Result<String> {
    let bytes = serde_json::to_vec(dataset).map_err(json_err("serializing dataset"))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub source_domain: String,
    pub target_domain: String,
    pub domain_gap: String,
    pub source_digest: String,
    pub target_digest: String,
    pub filter_log: FilterLog,
    pub cohort_users: usize,
    pub n_sampled: usize,
    pub n_tasks: usize,
    pub skipped_users: Vec<SkippedUser>,
    pub model: String,
    pub guidance: Option<Guidance>,
    /// Per variant label.
    pub task_set_digest: BTreeMap<String, String>,
    pub ledger: BTreeMap<String, UserLedger>,
    pub provider_calls: usize,
    pub wall_clock_secs: f64,
}

pub struct RunOutcome {
    pub manifest: RunManifest,
    pub variants: Vec<VariantResult>,
    pub output_dir: PathBuf,
}

impl RunOutcome {
    pub fn reports(&self) -> Vec<&MetricReport> {
        self.variants.iter().map(|v| &v.report).collect()
    }
}

fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let ctx = format!("writing {}", path.display());
    let file = File::create(&tmp).map_err(io_err(ctx.clone()))?;
    let mut w = BufWriter::new(file);
    body(&mut w).map_err(io_err(ctx.clone()))?;
    w.flush().map_err(io_err(ctx.clone()))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(io_err(ctx))
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn cache_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .provider
        .cache_dir
        .clone()
        .unwrap_or_else(|| config.output_dir.join("cache"))
}

fn templates(config: &ExperimentConfig) -> Result<PromptTemplates> {
    Ok(match &config.prompt.templates_dir {
        Some(dir) => PromptTemplates::from_dir(dir)?,
        None => PromptTemplates::default(),
    })
}

/// Gateways for task prompts and guidance. `provider` replaces the
/// configured task provider when given.
pub struct Gateways {
    pub task: Arc<Gateway>,
    pub guidance: Arc<Gateway>,
}

impl Gateways {
    pub fn from_config(config: &ExperimentConfig, provider: Option<Arc<dyn Provider>>) -> Result<Self> {
        let cache = cache_dir(config);
        let task_cfg = ProviderConfig {
            cache_dir: Some(cache.clone()),
            ..config.provider.clone()
        };
        let task = Arc::new(match provider {
            Some(p) => {
                let mut g = Gateway::new(p, task_cfg.model_name(), task_cfg.temperature).with_disk_cache(&cache);
                if let Some(cap) = task_cfg.requests_per_minute {
                    g = g.with_rate_limit(llm::RateLimiter::per_minute(cap));
                }
                g
            }
            None => llm::build_gateway(&task_cfg)?,
        });
        let guidance = match &config.guidance_provider {
            Some(g) => Arc::new(llm::build_gateway(&ProviderConfig {
                cache_dir: Some(g.cache_dir.clone().unwrap_or_else(|| cache.clone())),
                ..g.clone()
            })?),
            None => task.clone(),
        };
        Ok(Self { task, guidance })
    }

    /// Serve everything from the cache of `run_dir`.
    pub fn replay(config: &ExperimentConfig, run_dir: &Path) -> Self {
        let cache = run_dir.join("cache");
        let gw = |cfg: &ProviderConfig| {
            Arc::new(Gateway::new(
                Arc::new(ReplayProvider::new(&cache, cfg.model_name(), cfg.temperature)),
                cfg.model_name(),
                cfg.temperature,
            ))
        };
        let task = gw(&config.provider);
        let guidance = config.guidance_provider.as_ref().map_or_else(|| task.clone(), gw);
        Self { task, guidance }
    }
}

fn evaluate_all(
    config: &ExperimentConfig,
    tasks: &[CdrTask],
    n_sampled: usize,
    n_task_skipped: usize,
    source_domain: &str,
    target_domain: &str,
    gateways: &Gateways,
) -> Result<(Vec<VariantResult>, Option<Guidance>)> {
    let templates = templates(config)?;
    let guidance = if config.variants.iter().any(|v| v.include_guidance) {
        let request = GuidanceRequest::new(source_domain, target_domain, &templates);
        Some(prompting::make_guidance(
            &request,
            &gateways.guidance,
            &GuidanceCache::default(),
            &templates,
        )?)
    } else {
        None
    };
    let ctx = EvalContext {
        templates,
        rules: config.parse.rules()?,
        max_chars: config.prompt.max_chars,
        guidance,
    };
    let mut misses = Vec::new();
    let mut results = with_pool(config.parallelism, || {
        config
            .variants
            .iter()
            .map(|v| {
                evaluate_variant(
                    v,
                    tasks,
                    n_sampled,
                    n_task_skipped,
                    &gateways.task,
                    &ctx,
                    &mut misses,
                )
            })
            .collect::<Result<Vec<_>>>()
    })??;
    if !misses.is_empty() {
        misses.sort();
        misses.dedup();
        return Err(HarnessError::ReplayMisses(misses));
    }
    let base = results[config.baseline_index()].report.clone();
    for (i, r) in results.iter_mut().enumerate() {
        if i != config.baseline_index() {
            r.report.compare_to(&base);
        }
    }
    Ok((results, ctx.guidance))
}

fn write_reports(dir: &Path, title: &str, manifest: &RunManifest, results: &[VariantResult]) -> Result<()> {
    let reports: Vec<MetricReport> = results.iter().map(|r| r.report.clone()).collect();
    write_atomic(&dir.join("report.csv"), |w| {
        evaluation::write_reports_csv(&reports, &mut *w).map_err(std::io::Error::other)
    })?;
    let mut md = evaluation::reports_markdown(title, &reports);
    md.push_str("\n### Filtering\n\n");
    md.push_str("| Stage | Src users | Src items | Src inter. | Tgt users | Tgt items | Tgt inter. |\n");
    md.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    for s in &manifest.filter_log.stages {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            s.stage,
            s.source_users,
            s.source_items,
            s.source_interactions,
            s.target_users,
            s.target_items,
            s.target_interactions
        ));
    }
    md.push_str("\n### Users\n\n| Variant | Sampled | Ok | Skipped | Errored | Missing rate | Refusals |\n");
    md.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    for r in results {
        let l = r.ledger;
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.4} | {} |\n",
            r.report.label,
            l.sampled,
            l.ok,
            l.skipped,
            l.errored,
            r.report.mismatch.missing_rate,
            r.report.mismatch.refusals
        ));
    }
    write_atomic(&dir.join("report.md"), |w| w.write_all(md.as_bytes()))
}

fn report_title(manifest: &RunManifest) -> String {
    format!(
        "{} to {} ({}, {})",
        manifest.source_domain, manifest.target_domain, manifest.model, manifest.domain_gap
    )
}

/// Run an experiment with the configured provider.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    run_experiment_with(config, None)
}

/// Run an experiment, optionally replacing the task provider (the model
/// name for cache keys still comes from `config.provider`).
pub fn run_experiment_with(config: &ExperimentConfig, provider: Option<Arc<dyn Provider>>) -> Result<RunOutcome> {
    let started = Instant::now();
    let prepared = prepare(config)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    write_atomic(&dir.join("tasks.jsonl"), |w| taskgen::write_tasks_jsonl(&prepared.tasks, w))?;

    let gateways = Gateways::from_config(config, provider)?;
    let (results, guidance) = evaluate_all(
        config,
        &prepared.tasks,
        prepared.n_sampled,
        prepared.skipped.len(),
        &prepared.source.domain_id,
        &prepared.target.domain_id,
        &gateways,
    )?;

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        source_domain: prepared.source.domain_id.clone(),
        target_domain: prepared.target.domain_id.clone(),
        domain_gap: domain_gap(&prepared.source, &prepared.target).to_string(),
        source_digest: dataset_digest(&prepared.source)?,
        target_digest: dataset_digest(&prepared.target)?,
        filter_log: prepared.filter_log.clone(),
        cohort_users: prepared.cohort.users.len(),
        n_sampled: prepared.n_sampled,
        n_tasks: prepared.tasks.len(),
        skipped_users: prepared.skipped.clone(),
        model: gateways.task.model().to_string(),
        guidance,
        task_set_digest: results
            .iter()
            .map(|r| (r.report.label.clone(), r.task_set_digest.clone()))
            .collect(),
        ledger: results.iter().map(|r| (r.report.label.clone(), r.ledger)).collect(),
        provider_calls: gateways.task.provider_calls()
            + if Arc::ptr_eq(&gateways.task, &gateways.guidance) {
                0
            } else {
                gateways.guidance.provider_calls()
            },
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_reports(dir, &report_title(&manifest), &manifest, &results)?;
    write_atomic(&dir.join("manifest.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest).map_err(std::io::Error::other)
    })?;
    log::info!(
        "{} tasks, {} provider calls, {:.1}s",
        manifest.n_tasks,
        manifest.provider_calls,
        manifest.wall_clock_secs
    );
    Ok(RunOutcome {
        manifest,
        variants: results,
        output_dir: dir.clone(),
    })
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let path = run_dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
    serde_json::from_str(&text).map_err(json_err(format!("parsing {}", path.display())))
}

pub fn read_tasks(path: &Path) -> Result<Vec<CdrTask>> {
    let file = File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
    taskgen::read_tasks_jsonl(BufReader::new(file)).map_err(io_err(format!("reading {}", path.display())))
}

/// Recompute the reports of a finished run from `tasks.jsonl` and the
/// completion cache, without calling any provider. Rewrites `report.csv`
/// and `report.md`.
pub fn report(run_dir: &Path) -> Result<RunOutcome> {
    let manifest = read_manifest(run_dir)?;
    let tasks = read_tasks(&run_dir.join("tasks.jsonl"))?;
    let gateways = Gateways::replay(&manifest.config, run_dir);
    let (results, _) = evaluate_all(
        &manifest.config,
        &tasks,
        manifest.n_sampled,
        manifest.skipped_users.len(),
        &manifest.source_domain,
        &manifest.target_domain,
        &gateways,
    )?;
    write_reports(run_dir, &report_title(&manifest), &manifest, &results)?;
    Ok(RunOutcome {
        manifest,
        variants: results,
        output_dir: run_dir.to_path_buf(),
    })
}
