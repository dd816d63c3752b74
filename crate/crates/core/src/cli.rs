//! Command-line entry points.
//!
//! Exit codes: 0 ok, 1 findings, 2 usage or corpus error, 3 backend abort.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analytics::{emit_report, read_results, Report, ReportFormat, DEFAULT_BRITTLE_THRESHOLD};
use crate::client::{
    ClientError, CompletionClient, ContinuationClient, GenerationParams, LiveBackend, LiveConfig,
    RecordReplayClient, StubBackend, StubScript,
};
use crate::corpus::{load_corpus, validate_corpus, Corpus, DocumentProblem, Problem, TemplateProblem};
use crate::evaluator::{
    default_stop_markers, AttemptsConfig, EvalError, EvaluationRecord, Evaluator, Probe,
    DEFAULT_TEMPERATURES, MAX_ATTEMPTS, SCHEMA_VERSION,
};
use crate::sandbox::{Sandbox, SandboxConfig};
use crate::template::{expand, Sample, TemplateError, Variant, DEFAULT_VARIANT_CAP};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FINDINGS: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_ABORT: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "mutamark", version, about = "Mutation-based benchmark harness for code generation models")]
pub struct Cli {
    /// Increase log verbosity; with `expand`, also list every variant key.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print variant counts per problem.
    Expand(ExpandArgs),
    /// Check that every oracle is deterministic and healthy on every input.
    Validate(ValidateArgs),
    /// Evaluate selected problems and write results and reports.
    Run(RunArgs),
    /// Render a report from an existing results file.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Selection {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Problem ids or glob patterns, comma separated. Defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ExpansionArgs {
    #[arg(long, default_value_t = DEFAULT_VARIANT_CAP)]
    pub cap: usize,
    /// Draw this many variants per template instead of the full expansion.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SandboxArgs {
    /// TOML file with `[sandbox]`, `[generation]`, `[live]` and `[report]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    #[command(flatten)]
    pub selection: Selection,
    #[command(flatten)]
    pub expansion: ExpansionArgs,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub selection: Selection,
    #[arg(long, default_value_t = DEFAULT_VARIANT_CAP)]
    pub cap: usize,
    #[command(flatten)]
    pub sandbox: SandboxArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClientMode {
    Live,
    Record,
    Replay,
    Stub,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub selection: Selection,
    #[command(flatten)]
    pub expansion: ExpansionArgs,
    #[command(flatten)]
    pub sandbox: SandboxArgs,
    #[arg(long, value_enum, default_value_t = ClientMode::Replay)]
    pub client: ClientMode,
    /// Completion cache for record and replay modes. Defaults to
    /// `<out>/completions.jsonl`.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// JSON stub script, for `stub` mode or as the inner client of `record`.
    #[arg(long)]
    pub stub_script: Option<PathBuf>,
    #[arg(long)]
    pub attempts: Option<usize>,
    /// Temperature per attempt, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub temps: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the validation gate.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub results: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Markdown)]
    pub format: ReportFormat,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BRITTLE_THRESHOLD)]
    pub brittle_threshold: f64,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

type CmdResult = Result<u8, Failure>;

/// Parses arguments and runs the command, returning the exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();
    run(cli)
}

pub fn run(cli: Cli) -> u8 {
    let verbose = cli.verbose > 0;
    let result = match cli.command {
        Command::Expand(args) => cmd_expand(&args, verbose),
        Command::Validate(args) => cmd_validate(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Report(args) => cmd_report(&args),
    };
    match result {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            failure.code
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    sandbox: SandboxConfig,
    generation: GenerationParams,
    live: LiveOverrides,
    report: ReportOverrides,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LiveOverrides {
    model: Option<String>,
    max_in_flight: Option<usize>,
    requests_per_second: Option<f64>,
    max_tries: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ReportOverrides {
    brittle_threshold: f64,
}

impl Default for ReportOverrides {
    fn default() -> Self {
        Self {
            brittle_threshold: DEFAULT_BRITTLE_THRESHOLD,
        }
    }
}

fn load_file_config(args: &SandboxArgs) -> Result<FileConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    if let Some(secs) = args.timeout_secs {
        if !(secs > 0.0 && secs.is_finite()) {
            return Err(Failure::usage("--timeout-secs must be positive"));
        }
        config.sandbox.wall_seconds = secs;
    }
    if let Some(workers) = args.workers {
        config.sandbox.workers = workers;
    }
    Ok(config)
}

fn load_selected(selection: &Selection) -> Result<Corpus, Failure> {
    let mut corpus = load_corpus(&selection.corpus).map_err(|e| Failure::usage(e.to_string()))?;
    let patterns = selection
        .problems
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| glob::Pattern::new(p).map_err(|e| Failure::usage(format!("bad pattern `{p}`: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if !patterns.is_empty() {
        corpus.retain(|p| patterns.iter().any(|pat| pat.matches(p.id())));
    }
    Ok(corpus)
}

fn sample_of(expansion: &ExpansionArgs) -> Option<Sample> {
    expansion.sample.map(|count| Sample {
        count,
        seed: expansion.seed,
    })
}

fn cmd_expand(args: &ExpandArgs, verbose: bool) -> CmdResult {
    let corpus = load_selected(&args.selection)?;
    if corpus.is_empty() {
        println!("0 problems selected");
        return Ok(EXIT_OK);
    }
    let mut code = EXIT_OK;
    for problem in corpus.problems() {
        match problem {
            Problem::Template(t) => match expand(&t.template, args.expansion.cap, sample_of(&args.expansion)) {
                Ok(variants) => {
                    println!("{}: {} variants", t.id(), variants.len());
                    if verbose {
                        for v in &variants {
                            println!("  {}", v.key());
                        }
                    }
                }
                Err(e) => {
                    eprintln!("error: {}: {e}", t.id());
                    code = EXIT_USAGE;
                }
            },
            Problem::Document(d) => {
                let probes = Probe::applicable(d);
                println!("{}: {} probes", d.id(), probes.len());
                if verbose {
                    for p in &probes {
                        println!("  {}/{}", p.prompt_type(), p.label());
                    }
                }
            }
        }
    }
    Ok(code)
}

fn cmd_validate(args: &ValidateArgs) -> CmdResult {
    let config = load_file_config(&args.sandbox)?;
    let corpus = load_selected(&args.selection)?;
    let sandbox = Sandbox::new(&config.sandbox);
    let report = validate_corpus(&corpus, &sandbox, args.cap);
    print!("{report}");
    if report.is_clean() {
        println!("{} problems validated, no findings", corpus.len());
        Ok(EXIT_OK)
    } else {
        println!("{} findings", report.findings.len());
        Ok(EXIT_FINDINGS)
    }
}

/// Effective settings of a run, echoed into the run manifest.
#[derive(Debug, Clone, Serialize)]
struct RunConfig {
    corpus_root: PathBuf,
    problems: Vec<String>,
    client: ClientMode,
    attempts: usize,
    temperatures: Vec<f64>,
    sandbox: SandboxConfig,
    generation: GenerationParams,
    cap: usize,
    sample: Option<usize>,
    seed: u64,
    force: bool,
    brittle_threshold: f64,
}

fn temperature_schedule(attempts: Option<usize>, temps: Option<&[f64]>) -> Result<Vec<f64>, Failure> {
    let schedule = match (attempts, temps) {
        (Some(n), Some(t)) if n != t.len() => {
            return Err(Failure::usage(format!(
                "--attempts {n} does not match {} temperatures",
                t.len()
            )))
        }
        (_, Some(t)) => t.to_vec(),
        (Some(n), None) if (1..=MAX_ATTEMPTS).contains(&n) => DEFAULT_TEMPERATURES[..n].to_vec(),
        (Some(n), None) => return Err(Failure::usage(format!("--attempts must be 1..={MAX_ATTEMPTS}, got {n}"))),
        (None, None) => DEFAULT_TEMPERATURES.to_vec(),
    };
    if schedule.is_empty() || schedule.len() > MAX_ATTEMPTS {
        return Err(Failure::usage(format!("between 1 and {MAX_ATTEMPTS} temperatures required")));
    }
    if let Some(t) = schedule.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(Failure::usage(format!("invalid temperature {t}")));
    }
    Ok(schedule)
}

fn live_backend(overrides: &LiveOverrides) -> Result<ContinuationClient<LiveBackend>, Failure> {
    let mut config = LiveConfig::from_env().map_err(|e| Failure::usage(e.to_string()))?;
    if let Some(model) = &overrides.model {
        config.model = model.clone();
    }
    if let Some(n) = overrides.max_in_flight {
        config.max_in_flight = n;
    }
    if let Some(rps) = overrides.requests_per_second {
        config.requests_per_second = rps;
    }
    if let Some(tries) = overrides.max_tries {
        config.max_tries = tries;
    }
    let backend = LiveBackend::new(config).map_err(|e| Failure::usage(e.to_string()))?;
    Ok(ContinuationClient::new(backend))
}

fn stub_client(path: Option<&Path>) -> Result<ContinuationClient<StubBackend>, Failure> {
    let path = path.ok_or_else(|| Failure::usage("--stub-script is required for the stub client"))?;
    let script = StubScript::load(path).map_err(|e| Failure::usage(e.to_string()))?;
    Ok(ContinuationClient::new(StubBackend::new(script)))
}

fn build_client(
    args: &RunArgs,
    cache: &Path,
    live: &LiveOverrides,
) -> Result<Box<dyn CompletionClient>, Failure> {
    let cache_err = |e: ClientError| Failure::usage(e.to_string());
    Ok(match args.client {
        ClientMode::Stub => Box::new(stub_client(args.stub_script.as_deref())?),
        ClientMode::Live => Box::new(live_backend(live)?),
        ClientMode::Replay => {
            if !cache.is_file() {
                return Err(Failure::usage(format!(
                    "replay mode needs an existing cache, {} not found",
                    cache.display()
                )));
            }
            Box::new(RecordReplayClient::replay_only(cache).map_err(cache_err)?)
        }
        ClientMode::Record => {
            let inner: Box<dyn CompletionClient> = match &args.stub_script {
                Some(path) => Box::new(stub_client(Some(path))?),
                None => Box::new(live_backend(live)?),
            };
            if let Some(dir) = cache.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
            }
            Box::new(RecordReplayClient::record(cache, inner).map_err(cache_err)?)
        }
    })
}

fn sha256_file(path: &Path) -> Option<String> {
    let bytes = fs::read(path).ok()?;
    Some(format!("sha256:{}", hex::encode(Sha256::digest(bytes))))
}

fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn cmd_run(args: &RunArgs) -> CmdResult {
    let file_config = load_file_config(&args.sandbox)?;
    let temperatures = temperature_schedule(args.attempts, args.temps.as_deref())?;
    let mut generation = file_config.generation.clone();
    if generation.model.is_none() {
        generation.model = file_config.live.model.clone();
    }
    generation.validate().map_err(Failure::usage)?;
    let config = RunConfig {
        corpus_root: args.selection.corpus.clone(),
        problems: args.selection.problems.clone(),
        client: args.client,
        attempts: temperatures.len(),
        temperatures: temperatures.clone(),
        sandbox: file_config.sandbox.clone(),
        generation: generation.clone(),
        cap: args.expansion.cap,
        sample: args.expansion.sample,
        seed: args.expansion.seed,
        force: args.force,
        brittle_threshold: file_config.report.brittle_threshold,
    };

    let corpus = load_selected(&args.selection)?;
    let sandbox = Sandbox::new(&config.sandbox);
    if !args.force {
        let report = validate_corpus(&corpus, &sandbox, config.cap);
        if !report.is_clean() {
            eprint!("{report}");
            eprintln!("validation failed; fix the corpus or pass --force");
            return Ok(EXIT_FINDINGS);
        }
    }

    let cache = args
        .cache
        .clone()
        .unwrap_or_else(|| args.out.join("completions.jsonl"));
    let client = build_client(args, &cache, &file_config.live)?;
    let attempts = AttemptsConfig {
        temperatures,
        params: generation,
        stop_markers: default_stop_markers(),
    };
    let evaluator = Evaluator::new(client.as_ref(), &sandbox, &attempts);

    let mut findings = 0usize;
    let mut variant_jobs: Vec<(&TemplateProblem, Variant)> = Vec::new();
    let mut probe_jobs: Vec<(&DocumentProblem, Probe)> = Vec::new();
    for problem in corpus.problems() {
        match problem {
            Problem::Template(t) => match expand(&t.template, config.cap, sample_of(&args.expansion)) {
                Ok(variants) => variant_jobs.extend(variants.into_iter().map(|v| (t, v))),
                Err(e @ TemplateError::VariantCapExceeded { .. }) => {
                    eprintln!("error: {}: {e}", t.id());
                    findings += 1;
                }
                Err(e) => return Err(Failure::usage(format!("{}: {e}", t.id()))),
            },
            Problem::Document(d) => probe_jobs.extend(Probe::applicable(d).into_iter().map(|p| (d, p))),
        }
    }
    log::info!(
        "evaluating {} variants and {} probes",
        variant_jobs.len(),
        probe_jobs.len()
    );

    let outcomes = evaluator
        .evaluate_variants(&variant_jobs)
        .into_iter()
        .chain(evaluator.evaluate_probes(&probe_jobs));
    let mut records: Vec<EvaluationRecord> = Vec::new();
    let mut abort: Option<(String, usize)> = None;
    for outcome in outcomes {
        match outcome {
            Ok(record) => records.push(record),
            Err(EvalError::Backend(e)) => match &mut abort {
                Some((_, failed)) => *failed += 1,
                None => abort = Some((e.to_string(), 1)),
            },
            Err(e) => {
                eprintln!("error: {e}");
                findings += 1;
            }
        }
    }

    fs::create_dir_all(&args.out).map_err(|e| Failure::usage(format!("{}: {e}", args.out.display())))?;
    let io_err = |e: std::io::Error| Failure::usage(format!("writing outputs: {e}"));

    let mut results = String::new();
    let mut timing = String::new();
    for r in &records {
        results.push_str(&serde_json::to_string(r).expect("records serialize"));
        results.push('\n');
        let row = json!({
            "problem_id": r.problem_id,
            "prompt_type": r.prompt_type,
            "key": r.key,
            "total_ms": r.timing.total.as_secs_f64() * 1e3,
            "per_attempt_ms": r.timing.per_attempt.iter().map(|d| d.as_secs_f64() * 1e3).collect::<Vec<_>>(),
        });
        timing.push_str(&row.to_string());
        timing.push('\n');
    }
    if let Some((reason, failed)) = &abort {
        results.push_str(&json!({"aborted": {"reason": reason, "failed_jobs": failed}}).to_string());
        results.push('\n');
    }

    let report = Report::build(records, config.brittle_threshold).map_err(|e| Failure::usage(e.to_string()))?;
    let manifest = json!({
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "corpus_hash": corpus.content_hash(),
        "cache_hash": matches!(args.client, ClientMode::Record | ClientMode::Replay)
            .then(|| sha256_file(&cache))
            .flatten(),
        "stub_script_hash": args.stub_script.as_deref().and_then(sha256_file),
        "records": report.records.len(),
        "aborted": abort.is_some(),
    });

    let out = &args.out;
    write_atomic(&out.join("results.jsonl"), results.as_bytes()).map_err(io_err)?;
    write_atomic(&out.join("timing.jsonl"), timing.as_bytes()).map_err(io_err)?;
    write_atomic(&out.join("report.md"), emit_report(&report, ReportFormat::Markdown).as_bytes())
        .map_err(io_err)?;
    write_atomic(&out.join("report.csv"), emit_report(&report, ReportFormat::Csv).as_bytes()).map_err(io_err)?;
    let manifest = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&out.join("manifest.json"), manifest.as_bytes()).map_err(io_err)?;

    if let Some((reason, failed)) = abort {
        return Err(Failure {
            code: EXIT_ABORT,
            message: format!("backend abort ({failed} jobs failed): {reason}"),
        });
    }
    println!(
        "{} records written to {}",
        report.records.len(),
        out.display()
    );
    Ok(if findings > 0 { EXIT_FINDINGS } else { EXIT_OK })
}

fn cmd_report(args: &ReportArgs) -> CmdResult {
    let text = fs::read_to_string(&args.results)
        .map_err(|e| Failure::usage(format!("{}: {e}", args.results.display())))?;
    let (records, trailer) =
        read_results(&text).map_err(|e| Failure::usage(format!("{}: {e}", args.results.display())))?;
    if let Some(trailer) = trailer {
        eprintln!("warning: results are partial: {trailer}");
    }
    let report = Report::build(records, args.brittle_threshold).map_err(|e| Failure::usage(e.to_string()))?;
    let rendered = emit_report(&report, args.format);
    match &args.out {
        Some(path) => write_atomic(path, rendered.as_bytes())
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?,
        None => print!("{rendered}"),
    }
    Ok(EXIT_OK)
}
