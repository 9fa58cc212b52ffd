use std::fs::File;
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cdrbench::corpus::{self, SyntheticSpec};
use cdrbench::filtering;
use cdrbench::harness::{self, DomainFiles, ExperimentConfig, MatrixSpec, Overrides};
use cdrbench::llm::ProviderKind;
use cdrbench::parse::{self, MatchMode, ParseRules, Trace};
use cdrbench::taskgen;

#[derive(Parser)]
#[command(name = "cdrbench", version, about = "Cross-domain recommendation benchmark for LLM rankers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a review dump plus metadata (or generate a synthetic corpus) into JSON snapshots.
    Ingest(IngestArgs),
    /// Apply the filtering pipeline and write the cohort CSV.
    Filter(FilterArgs),
    /// Build tasks for the sampled cohort users.
    Gentasks(GentasksArgs),
    /// Run an experiment end to end.
    Run(RunArgs),
    /// Recompute reports of a finished run from its cache.
    Report(ReportArgs),
    /// Show how a raw completion is parsed against a task's candidates.
    ParseDebug(ParseDebugArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long, required_unless_present = "synthetic")]
    reviews: Option<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    metadata: Option<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    domain_id: Option<String>,
    #[arg(long)]
    group_id: Option<String>,
    /// Snapshot file (single domain) or directory (synthetic).
    #[arg(long)]
    out: PathBuf,
    /// Generate a synthetic corpus instead of reading files.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 400)]
    items: usize,
    #[arg(long, default_value_t = 2)]
    domains: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// http, oracle, random, replay or adversarial.
    #[arg(long)]
    provider: Option<ProviderKind>,
    /// Model name sent to the API and used in cache keys.
    #[arg(long)]
    model: Option<String>,
    /// Base URL of an OpenAI-compatible API.
    #[arg(long)]
    endpoint: Option<String>,
    /// Source purchases shown in the prompt.
    #[arg(long)]
    history_len: Option<usize>,
    /// Candidates per task, ground truth included.
    #[arg(long)]
    candidate_size: Option<usize>,
    /// Cap on sampled cohort users.
    #[arg(long)]
    max_users: Option<usize>,
    /// Seed for user sampling, negatives and shuffles.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Run directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Overrides {
            provider: self.provider,
            model: self.model.clone(),
            endpoint: self.endpoint.clone(),
            history_len: self.history_len,
            candidate_size: self.candidate_size,
            max_users: self.max_users,
            seed: self.seed,
            parallelism: self.parallelism,
            output_dir: self.output_dir.clone(),
        }
        .apply(&mut config);
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct FilterArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "cohort.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct GentasksArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "tasks.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Sweep spec (JSON); runs every cell into its own subdirectory.
    #[arg(long)]
    matrix: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Args)]
struct ParseDebugArgs {
    /// tasks.jsonl of a run.
    #[arg(long)]
    tasks: PathBuf,
    /// Task to parse against; the first task when omitted.
    #[arg(long)]
    user: Option<String>,
    #[arg(long, default_value_t = 0)]
    repeat: usize,
    /// Raw completion text; `-` reads stdin.
    #[arg(long)]
    completion: PathBuf,
    #[arg(long)]
    refusals: Option<PathBuf>,
    /// Enable fuzzy matching at this similarity threshold.
    #[arg(long)]
    fuzzy: Option<f64>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Ingest(a) => ingest(a),
        Command::Filter(a) => filter(a),
        Command::Gentasks(a) => gentasks(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
        Command::ParseDebug(a) => parse_debug(a),
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    if a.synthetic {
        let spec = SyntheticSpec::new(a.users, a.items, a.domains, a.seed);
        std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        for d in corpus::generate_synthetic(&spec)? {
            let path = a.out.join(format!("{}.json", d.domain_id));
            harness::write_snapshot(&d, &path)?;
            println!(
                "{}: {} users, {} items, {} interactions -> {}",
                d.domain_id,
                d.users().len(),
                d.items().len(),
                d.interactions.len(),
                path.display()
            );
        }
        return Ok(());
    }
    let files = DomainFiles {
        reviews: a.reviews.expect("required by clap"),
        metadata: a.metadata.expect("required by clap"),
        domain_id: a.domain_id.expect("required by clap"),
        group_id: a.group_id,
    };
    let (dataset, load, meta) = harness::ingest(&files)?;
    harness::write_snapshot(&dataset, &a.out)?;
    println!(
        "reviews: {} lines, {} skipped, {} interactions, {} duplicate events",
        load.total_lines, load.skipped_lines, load.emitted, load.duplicate_events
    );
    println!(
        "metadata: {} lines, {} skipped, {} titles, {} interactions dropped for missing titles",
        meta.total_lines, meta.skipped_lines, meta.titles, meta.dropped_interactions
    );
    println!(
        "{} ({}): {} users, {} items -> {}",
        dataset.domain_id,
        dataset.group_id,
        dataset.users().len(),
        dataset.items().len(),
        a.out.display()
    );
    Ok(())
}

fn filter(a: FilterArgs) -> Result<()> {
    let config = a.config.load()?;
    let (source, target) = harness::load_datasets(&config.data)?;
    let (cohort, log) = filtering::run_pipeline(&source, &target, &config.filter)?;
    for stage in &log.stages {
        println!("{stage}");
    }
    let out = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    cohort.write_csv(BufWriter::new(out))?;
    println!("{} cohort users -> {}", cohort.users.len(), a.out.display());
    Ok(())
}

fn gentasks(a: GentasksArgs) -> Result<()> {
    let config = a.config.load()?;
    let prepared = harness::prepare(&config)?;
    let out = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    taskgen::write_tasks_jsonl(&prepared.tasks, BufWriter::new(out))?;
    for s in &prepared.skipped {
        println!("skipped {}: {}", s.user_id, s.reason);
    }
    println!(
        "{} of {} sampled users -> {}",
        prepared.tasks.len(),
        prepared.n_sampled,
        a.out.display()
    );
    Ok(())
}

fn print_outcome(outcome: &harness::RunOutcome) -> Result<()> {
    let md = std::fs::read_to_string(outcome.output_dir.join("report.md"))?;
    println!("{md}");
    println!("run directory: {}", outcome.output_dir.display());
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let config = a.config.load()?;
    let Some(matrix) = a.matrix else {
        return print_outcome(&harness::run_experiment(&config)?);
    };
    let text = std::fs::read_to_string(&matrix).with_context(|| format!("reading {}", matrix.display()))?;
    let spec: MatrixSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", matrix.display()))?;
    for (label, cell) in harness::expand_matrix(&config, &spec) {
        println!("# {label}");
        print_outcome(&harness::run_experiment(&cell)?)?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    print_outcome(&harness::report(&a.run_dir)?)
}

fn read_input(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
    }
}

fn parse_debug(a: ParseDebugArgs) -> Result<()> {
    let tasks = harness::read_tasks(&a.tasks)?;
    let task = match &a.user {
        Some(u) => tasks.iter().find(|t| &t.user_id == u),
        None => tasks.first(),
    };
    let Some(task) = task else {
        bail!("no matching task in {}", a.tasks.display());
    };
    if a.repeat >= task.shuffles.len() {
        bail!("repeat {} out of range ({} repeats)", a.repeat, task.shuffles.len());
    }
    let mut rules = ParseRules::default();
    if let Some(path) = &a.refusals {
        rules = rules.with_refusals_file(path)?;
    }
    if let Some(t) = a.fuzzy {
        rules.match_mode = MatchMode::Fuzzy;
        rules.fuzzy_threshold = t;
    }
    rules.validate()?;
    let raw = read_input(&a.completion)?;
    let presented = task.presented_titles(a.repeat);
    let (parsed, decisions) = parse::parse_completion(&raw, &presented, &rules);
    print!(
        "{}",
        Trace {
            parsed: &parsed,
            decisions: &decisions,
            candidate_titles: &presented,
        }
    );
    println!(
        "status {:?}: {} ranked, {} missing, {} hallucinated, {} format fixes",
        parsed.status,
        parsed.ranked.len(),
        parsed.n_missing,
        parsed.n_hallucinated,
        parsed.n_format_fixes
    );
    if parsed.is_ok() {
        let gt = task.presented_ground_truth(a.repeat);
        let metrics = cdrbench::MetricVector::compute(&parsed.ranked, &gt);
        let labels = cdrbench::MetricVector::labels();
        let cells: Vec<String> = labels.iter().zip(metrics.0).map(|(l, v)| format!("{l}={v:.4}")).collect();
        println!("{}", cells.join(" "));
    }
    Ok(())
}
