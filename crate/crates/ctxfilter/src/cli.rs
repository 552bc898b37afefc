//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on domain errors, 2 on usage errors. Errors
//! are also written to standard error as one JSON object per line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use ctxfilter_core::backend::Generator;
use ctxfilter_core::chunk::{build_index, ChunkerConfig, CrossFileIndex, Retriever};
use ctxfilter_core::corpus::{CompletionInstance, RepoSnapshot};
use ctxfilter_core::dataset::{
    build_records, sample_targets, LabeledInstance, RecordFormat, SamplingConfig, VerbalizeConfig,
};
use ctxfilter_core::engine::{self, EngineConfig, EngineError};
use ctxfilter_core::eval::{evaluate_instance, length_report, negative_subset, EvalReport, StrategyKind, StrategySpec};
use ctxfilter_core::label::{label_chunks, polarity_distribution, LabelError, LabelerConfig, LabelingOutcome};
use ctxfilter_core::mock::{OracleEntry, OverlapOracle, OverlapParams};
use ctxfilter_core::prompt::{Budget, PromptConfig, PromptError};
use ctxfilter_core::synth::{synth_corpus, PlantSpec};

use crate::config::{load_config, prescan_config, with_file_defaults, ConfigError};
use crate::formats::{
    self, index_rows, label_rows, summary_table, write_jsonl, CompletionRow, DatasetHeader, RetrieveRow, TraceRow,
    DATASET_VERSION,
};
use crate::record::{RecordingBackend, ReplayBackend, ScriptFile};
use crate::remote::{RemoteBackend, RemoteConfig};
use crate::repo::{load_repo, write_repo};
use crate::tasks::{load_tasks, write_tasks};

#[derive(Debug, Parser)]
#[command(name = "ctxfilter", version, about = "Retrieval-context filtering for repository-level code completion")]
pub struct Cli {
    /// Flat TOML file whose keys are option ids, e.g. `top_k = 5`.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print the resolved options as TOML and exit.
    #[arg(long, global = true)]
    pub show_config: bool,
    /// Debug logging, including request bodies.
    #[arg(long, global = true, env = "CTXFILTER_DEBUG")]
    pub debug: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(untagged)]
pub enum Command {
    /// Chunk a repository and dump the index.
    Index(IndexCmd),
    /// Rank cross-file chunks for each task.
    Retrieve(RetrieveCmd),
    /// Score and label the retrieved chunks of each task.
    Label(LabelCmd),
    /// Sample targets, label them and write training records.
    BuildDataset(BuildDatasetCmd),
    /// Filter the retrieved context and complete each task.
    Complete(CompleteCmd),
    /// Filter the retrieved context and export the generation prompts.
    FilterPrompt(FilterPromptCmd),
    /// Compare context strategies on tasks with known targets.
    Evaluate(EvaluateCmd),
    /// Write a synthetic repository with planted chunks.
    SynthCorpus(SynthCmd),
}

#[derive(Debug, Args, Serialize)]
pub struct RepoArgs {
    /// Repository root; task target paths are relative to it.
    #[arg(long, env = "CTXFILTER_REPO_ROOT")]
    pub repo_root: PathBuf,
    /// File extensions to load.
    #[arg(long, value_delimiter = ',', default_value = "py", env = "CTXFILTER_EXTENSIONS")]
    pub extensions: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct ChunkArgs {
    /// Chunk length in lines.
    #[arg(long, default_value_t = 10, env = "CTXFILTER_WINDOW")]
    pub window: usize,
    /// Lines between chunk starts.
    #[arg(long, default_value_t = 5, env = "CTXFILTER_STRIDE")]
    pub stride: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct RetrievalArgs {
    /// Number of chunks retrieved per task.
    #[arg(long, default_value_t = 10, env = "CTXFILTER_TOP_K")]
    pub top_k: usize,
    /// Prefix lines used as the retrieval query.
    #[arg(long, default_value_t = 10, env = "CTXFILTER_QUERY_WINDOW")]
    pub query_window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Deterministic identifier-overlap oracle.
    Overlap,
    /// Answers from a script file.
    Scripted,
    /// Answers from a recorded log.
    Replay,
    /// OpenAI-style completions server.
    Remote,
}

#[derive(Debug, Args, Serialize)]
pub struct BackendArgs {
    /// Model backend.
    #[arg(long, value_enum, env = "CTXFILTER_BACKEND")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendKind>,
    /// Oracle entries (overlap), script (scripted) or log (replay).
    #[arg(long, env = "CTXFILTER_BACKEND_FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend_file: Option<PathBuf>,
    /// Record every backend exchange to this file.
    #[arg(long, env = "CTXFILTER_RECORD")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<PathBuf>,
    /// Overlap oracle NLL per target token without help.
    #[arg(long, default_value_t = 2.0, env = "CTXFILTER_BASE_NLL")]
    pub base_nll: f64,
    /// Overlap oracle gain for helpful context.
    #[arg(long, default_value_t = 0.5, env = "CTXFILTER_GAIN")]
    pub gain: f64,
    /// Overlap oracle penalty for conflicting context.
    #[arg(long, default_value_t = 0.0, env = "CTXFILTER_CONFLICT_PENALTY")]
    pub conflict_penalty: f64,
    /// Completions server base URL.
    #[arg(long, default_value = "http://127.0.0.1:8000", env = "CTXFILTER_ENDPOINT")]
    pub endpoint: String,
    /// Completions path under the base URL.
    #[arg(long, default_value = "/v1/completions", env = "CTXFILTER_ENDPOINT_PATH")]
    pub endpoint_path: String,
    /// Model name sent with each request.
    #[arg(long, default_value = "", env = "CTXFILTER_MODEL")]
    pub model: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "CTXFILTER_API_KEY", env = "CTXFILTER_API_KEY_ENV")]
    pub api_key_env: String,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 60, env = "CTXFILTER_TIMEOUT")]
    pub timeout: u64,
    /// Maximum concurrent requests to the server.
    #[arg(long, default_value_t = 8, env = "CTXFILTER_MAX_IN_FLIGHT")]
    pub max_in_flight: usize,
    /// Worker threads [default: logical processors, capped by --max-in-flight for remote].
    #[arg(long, env = "CTXFILTER_WORKERS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct BudgetArgs {
    /// Maximum prompt tokens.
    #[arg(long = "budget", id = "max_prompt_tokens", default_value_t = 4096, env = "CTXFILTER_BUDGET")]
    pub max_prompt_tokens: usize,
    /// Tokens reserved for the in-file context.
    #[arg(long, default_value_t = 1024, env = "CTXFILTER_IN_FILE_BUDGET")]
    pub in_file_budget: usize,
    /// Tokens reserved for cross-file chunks.
    #[arg(long, default_value_t = 3072, env = "CTXFILTER_CROSS_FILE_BUDGET")]
    pub cross_file_budget: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EngineArgs {
    /// Retrieve when P(<MC>) is at least this.
    #[arg(long = "tc", id = "t_c", default_value_t = 0.3, env = "CTXFILTER_TC")]
    pub t_c: f64,
    /// Keep a chunk when P(<pos>) is at least this.
    #[arg(long = "tp", id = "t_p", default_value_t = 0.3, env = "CTXFILTER_TP")]
    pub t_p: f64,
    /// Judge a chunk negative when P(<neg>) is at least this.
    #[arg(long = "tn", id = "t_n", default_value_t = 0.3, env = "CTXFILTER_TN")]
    pub t_n: f64,
    /// Maximum generated tokens.
    #[arg(long, default_value_t = 128, env = "CTXFILTER_MAX_NEW_TOKENS")]
    pub max_new_tokens: usize,
    /// Keep judged non-positive chunks inline in the policy sequence.
    #[arg(long, env = "CTXFILTER_KEEP_JUDGED_INLINE")]
    pub keep_judged_inline: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct LabelThresholds {
    /// Positive when the contribution score exceeds this.
    #[arg(long = "tp", id = "t_pos", default_value_t = 0.10, allow_negative_numbers = true, env = "CTXFILTER_T_POS")]
    pub t_pos: f64,
    /// Negative when the contribution score is below this.
    #[arg(long = "tn", id = "t_neg", default_value_t = -0.05, allow_negative_numbers = true, env = "CTXFILTER_T_NEG")]
    pub t_neg: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct PrefixedLabelThresholds {
    /// Labeler: positive when the contribution score exceeds this.
    #[arg(long = "label-tp", id = "t_pos", default_value_t = 0.10, allow_negative_numbers = true, env = "CTXFILTER_T_POS")]
    pub t_pos: f64,
    /// Labeler: negative when the contribution score is below this.
    #[arg(long = "label-tn", id = "t_neg", default_value_t = -0.05, allow_negative_numbers = true, env = "CTXFILTER_T_NEG")]
    pub t_neg: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct IndexCmd {
    #[command(flatten)]
    #[serde(flatten)]
    pub repo: RepoArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub chunk: ChunkArgs,
    /// Output file [default: stdout].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RetrieveCmd {
    #[command(flatten)]
    #[serde(flatten)]
    pub repo: RepoArgs,
    /// Task file (JSON lines).
    #[arg(long, env = "CTXFILTER_TASKS")]
    pub tasks: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub chunk: ChunkArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub retrieval: RetrievalArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct LabelCmd {
    #[command(flatten)]
    #[serde(flatten)]
    pub repo: RepoArgs,
    #[arg(long, env = "CTXFILTER_TASKS")]
    pub tasks: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub chunk: ChunkArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub retrieval: RetrievalArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub thresholds: LabelThresholds,
    #[command(flatten)]
    #[serde(flatten)]
    pub budget: BudgetArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildDatasetCmd {
    #[command(flatten)]
    #[serde(flatten)]
    pub repo: RepoArgs,
    /// Use these tasks instead of sampling targets from the repository.
    #[arg(long, env = "CTXFILTER_TASKS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
    /// Seed for target sampling and chunk shuffling.
    #[arg(long, default_value_t = 0, env = "CTXFILTER_SEED")]
    pub seed: u64,
    /// Targets sampled per repository.
    #[arg(long, default_value_t = 10, env = "CTXFILTER_PER_REPO")]
    pub per_repo: usize,
    /// Record formats to write.
    #[arg(long, value_delimiter = ',', default_value = "all_candidates,positive_only", env = "CTXFILTER_FORMATS")]
    pub formats: Vec<String>,
    /// Minimum edit similarity for the sufficiency filter.
    #[arg(long, default_value_t = 0.5, env = "CTXFILTER_SUFFICIENCY")]
    pub sufficiency: f64,
    /// Loss weight of signal tokens.
    #[arg(long, default_value_t = 2.0, env = "CTXFILTER_LAMBDA")]
    pub lambda: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub chunk: ChunkArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub retrieval: RetrievalArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub thresholds: PrefixedLabelThresholds,
    #[command(flatten)]
    #[serde(flatten)]
    pub budget: BudgetArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CompleteCmd {
    #[command(flatten)]
    #[serde(flatten)]
    pub repo: RepoArgs,
    #[arg(long, env = "CTXFILTER_TASKS")]
    pub tasks: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub chunk: ChunkArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub retrieval: RetrievalArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub budget: BudgetArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub backend: BackendArgs,
    /// Write the decision log (JSON lines) to this file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FilterPromptCmd {
    #[command(flatten)]
    #[serde(flatten)]
    pub repo: RepoArgs,
    #[arg(long, env = "CTXFILTER_TASKS")]
    pub tasks: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub chunk: ChunkArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub retrieval: RetrievalArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub budget: BudgetArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub backend: BackendArgs,
    /// Directory for one prompt file per task plus manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyArg {
    None,
    Full,
    Filter,
    Replay,
}

impl StrategyArg {
    fn kind(self) -> StrategyKind {
        match self {
            StrategyArg::None => StrategyKind::NoRetrieve,
            StrategyArg::Full => StrategyKind::FullRetrieve,
            StrategyArg::Filter => StrategyKind::Filtered,
            StrategyArg::Replay => StrategyKind::ExternalPromptReplay,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateCmd {
    #[command(flatten)]
    #[serde(flatten)]
    pub repo: RepoArgs,
    #[arg(long, env = "CTXFILTER_TASKS")]
    pub tasks: PathBuf,
    /// Strategy to run when not comparing.
    #[arg(long, value_enum, default_value = "filter", env = "CTXFILTER_STRATEGY")]
    pub strategy: StrategyArg,
    /// Run none, full and filter (and replay with --prompts-dir).
    #[arg(long)]
    pub compare: bool,
    /// Exported prompts for the replay strategy.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    /// Also report the tasks with at least one negative chunk.
    #[arg(long)]
    pub negative_subset: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub chunk: ChunkArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub retrieval: RetrievalArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub thresholds: PrefixedLabelThresholds,
    #[command(flatten)]
    #[serde(flatten)]
    pub budget: BudgetArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub backend: BackendArgs,
    /// Per-task rows (JSON lines).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthCmd {
    #[arg(long, default_value_t = 0, env = "CTXFILTER_SEED")]
    pub seed: u64,
    /// Number of tasks.
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
    /// Planted helpful,misleading,irrelevant chunks per task; repeat to cycle.
    #[arg(long, default_value = "1,1,8")]
    pub plant: Vec<String>,
    /// Receives repo/, tasks.jsonl, plants.jsonl and oracle.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Error that maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<UsageError>() || cause.is::<ConfigError>() {
            return "usage";
        }
        if let Some(p) = cause.downcast_ref::<PromptError>() {
            return match p {
                PromptError::PromptOverflow { .. } => "prompt_overflow",
                _ => "prompt",
            };
        }
        if cause.is::<EngineError>() {
            return "engine";
        }
        if cause.is::<LabelError>() {
            return "label";
        }
        if cause.is::<ctxfilter_core::dataset::DatasetError>() {
            return "dataset";
        }
        if cause.is::<crate::tasks::TaskError>() {
            return "tasks";
        }
        if cause.is::<io::Error>() || cause.is::<crate::formats::FormatError>() {
            return "io";
        }
    }
    "error"
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<io::Error>())
        .any(|io| io.kind() == io::ErrorKind::BrokenPipe)
}

fn report_error(kind: &str, message: &str) {
    let record = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{record}");
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let mut cmd = Cli::command();
    if let Some(path) = prescan_config(&args) {
        match load_config(&path).and_then(|values| with_file_defaults(cmd, &path, &values)) {
            Ok(c) => cmd = c,
            Err(e) => {
                eprintln!("error: {e}");
                report_error("usage", &e.to_string());
                return 2;
            }
        }
    }
    let cli = match cmd.try_get_matches_from(&args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                report_error("usage", e.kind().as_str().unwrap_or("invalid arguments"));
            }
            return code;
        }
    };
    let level = if cli.debug { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("CTXFILTER_LOG", level))
        .format_timestamp(None)
        .try_init();
    if cli.show_config {
        return match toml::to_string(&cli.command) {
            Ok(text) => {
                print!("{text}");
                0
            }
            Err(e) => {
                report_error("error", &e.to_string());
                1
            }
        };
    }
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) if is_broken_pipe(&e) => 0,
        Err(e) => {
            let kind = error_kind(&e);
            eprintln!("error: {e:#}");
            report_error(kind, &format!("{e:#}"));
            if kind == "usage" {
                2
            } else {
                1
            }
        }
    }
}

pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Index(c) => cmd_index(c),
        Command::Retrieve(c) => cmd_retrieve(c),
        Command::Label(c) => cmd_label(c),
        Command::BuildDataset(c) => cmd_build_dataset(c),
        Command::Complete(c) => cmd_complete(c),
        Command::FilterPrompt(c) => cmd_filter_prompt(c),
        Command::Evaluate(c) => cmd_evaluate(c),
        Command::SynthCorpus(c) => cmd_synth(c),
    }
}

/// Output file, or stdout when `path` is `None`.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            Box::new(BufWriter::new(
                fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
            ))
        }
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn chunker(c: &ChunkArgs) -> Result<ChunkerConfig> {
    ChunkerConfig::new(c.window, c.stride).map_err(|e| usage(e.to_string()))
}

fn load_snapshot(r: &RepoArgs) -> Result<RepoSnapshot> {
    let loaded = load_repo(&r.repo_root, &r.extensions, true)?;
    Ok(loaded.snapshot)
}

fn load_index(r: &RepoArgs, c: &ChunkArgs) -> Result<(RepoSnapshot, CrossFileIndex)> {
    let snapshot = load_snapshot(r)?;
    let index = build_index(&snapshot, None, chunker(c)?);
    Ok((snapshot, index))
}

fn instances(path: &Path, require_target: bool, repo: &RepoSnapshot) -> Result<Vec<CompletionInstance>> {
    let loaded = load_tasks(path, require_target)?;
    for inst in &loaded.instances {
        if repo.file(&inst.target_path).is_none() {
            log::warn!("task {}: {} is not in the repository", inst.id, inst.target_path);
        }
    }
    Ok(loaded.instances)
}

fn prompt_config(b: &BudgetArgs) -> Result<PromptConfig> {
    let cfg = PromptConfig {
        budget: Budget {
            max_prompt_tokens: b.max_prompt_tokens,
            in_file_budget: b.in_file_budget,
            cross_file_budget: b.cross_file_budget,
        },
        ..PromptConfig::default()
    };
    cfg.budget.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn labeler(t_pos: f64, t_neg: f64) -> Result<LabelerConfig> {
    let cfg = LabelerConfig { t_pos, t_neg };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn engine_config(e: &EngineArgs, r: &RetrievalArgs, b: &BudgetArgs) -> Result<EngineConfig> {
    let cfg = EngineConfig {
        t_c: e.t_c,
        t_p: e.t_p,
        t_n: e.t_n,
        prompt: prompt_config(b)?,
        top_k: r.top_k,
        max_generation_tokens: e.max_new_tokens,
        keep_judged_inline: e.keep_judged_inline,
        ..EngineConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

type DynBackend = Box<dyn Generator + Send + Sync>;

/// The selected backend, optionally wrapped in a recorder.
pub enum Backend {
    Plain(DynBackend),
    Recording(RecordingBackend<DynBackend>, PathBuf),
}

impl Backend {
    pub fn generator(&self) -> &(dyn Generator + Sync) {
        match self {
            Backend::Plain(b) => b.as_ref(),
            Backend::Recording(r, _) => r,
        }
    }

    /// Writes the recording, if any.
    pub fn finish(&self) -> Result<()> {
        if let Backend::Recording(r, path) = self {
            r.save(path)?;
        }
        Ok(())
    }
}

pub struct BackendSetup {
    pub backend: Backend,
    pub workers: usize,
}

fn build_backend(a: &BackendArgs, layout: &PromptConfig) -> Result<BackendSetup> {
    let kind = a
        .backend
        .ok_or_else(|| usage("--backend is required (overlap, scripted, replay or remote)"))?;
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut cap = cpus;
    let inner: DynBackend = match kind {
        BackendKind::Overlap => {
            let entries: Vec<OracleEntry> = match &a.backend_file {
                Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                    .with_context(|| format!("parsing oracle entries in {}", p.display()))?,
                None => Vec::new(),
            };
            let params = OverlapParams {
                base_nll: a.base_nll,
                gain: a.gain,
                conflict_penalty: a.conflict_penalty,
            };
            Box::new(OverlapOracle::new(params).with_layout(layout.clone()).with_entries(entries))
        }
        BackendKind::Scripted => {
            let p = a.backend_file.as_ref().ok_or_else(|| usage("--backend scripted needs --backend-file"))?;
            cap = 1;
            Box::new(ScriptFile::load(p)?.into_backend())
        }
        BackendKind::Replay => {
            let p = a.backend_file.as_ref().ok_or_else(|| usage("--backend replay needs --backend-file"))?;
            Box::new(ReplayBackend::load(p)?)
        }
        BackendKind::Remote => {
            let cfg = RemoteConfig {
                base_url: a.endpoint.clone(),
                path: a.endpoint_path.clone(),
                model: a.model.clone(),
                api_key: std::env::var(&a.api_key_env).ok(),
                timeout_secs: a.timeout,
                max_in_flight: a.max_in_flight,
                ..RemoteConfig::default()
            };
            cap = cap.min(a.max_in_flight.max(1));
            Box::new(RemoteBackend::new(cfg))
        }
    };
    let workers = a.workers.unwrap_or(cap).clamp(1, cap.max(1));
    let backend = match &a.record {
        Some(p) => Backend::Recording(RecordingBackend::new(inner), p.clone()),
        None => Backend::Plain(inner),
    };
    Ok(BackendSetup { backend, workers })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| anyhow!("starting worker pool: {e}"))
}

fn cmd_index(c: &IndexCmd) -> Result<()> {
    let (_, index) = load_index(&c.repo, &c.chunk)?;
    let mut out = output(c.out.as_deref())?;
    write_jsonl(&mut out, index_rows(&index))?;
    out.flush()?;
    Ok(())
}

fn cmd_retrieve(c: &RetrieveCmd) -> Result<()> {
    let (repo, index) = load_index(&c.repo, &c.chunk)?;
    let tasks = instances(&c.tasks, false, &repo)?;
    let mut out = output(c.out.as_deref())?;
    for inst in &tasks {
        let ranked = index
            .excluding(&inst.target_path, c.retrieval.query_window)
            .retrieve(&inst.prefix_lines, c.retrieval.top_k);
        let rows = ranked.ranked.iter().enumerate().map(|(i, s)| RetrieveRow {
            instance_id: inst.id.clone(),
            rank: i + 1,
            path: s.chunk.path.clone(),
            start_line: s.chunk.start_line,
            end_line: s.chunk.end_line,
            score: s.score,
        });
        write_jsonl(&mut out, rows)?;
    }
    out.flush()?;
    Ok(())
}

/// Retrieves and labels each task in parallel; results keep task order.
fn label_all(
    tasks: &[CompletionInstance],
    index: &CrossFileIndex,
    retrieval: &RetrievalArgs,
    backend: &(dyn Generator + Sync),
    labeler: &LabelerConfig,
    prompt: &PromptConfig,
    workers: usize,
) -> Result<Vec<Result<LabelingOutcome, LabelError>>> {
    Ok(pool(workers)?.install(|| {
        tasks
            .par_iter()
            .map(|inst| {
                let chunks: Vec<_> = index
                    .excluding(&inst.target_path, retrieval.query_window)
                    .retrieve(&inst.prefix_lines, retrieval.top_k)
                    .ranked
                    .into_iter()
                    .map(|s| s.chunk)
                    .collect();
                label_chunks(inst, &chunks, backend, labeler, prompt)
            })
            .collect()
    }))
}

fn cmd_label(c: &LabelCmd) -> Result<()> {
    let labeler = labeler(c.thresholds.t_pos, c.thresholds.t_neg)?;
    let prompt = prompt_config(&c.budget)?;
    let (repo, index) = load_index(&c.repo, &c.chunk)?;
    let tasks = instances(&c.tasks, true, &repo)?;
    let setup = build_backend(&c.backend, &prompt)?;
    let results = label_all(&tasks, &index, &c.retrieval, setup.backend.generator(), &labeler, &prompt, setup.workers)?;
    setup.backend.finish()?;
    let mut out = output(c.out.as_deref())?;
    let mut ok = Vec::new();
    let mut failed = 0;
    for r in results {
        match r {
            Ok(o) => {
                for u in &o.unavailable {
                    log::warn!("{}: chunk {}:{} unavailable: {}", o.instance_id, u.path, u.start_line, u.reason);
                }
                write_jsonl(&mut out, label_rows(&o))?;
                ok.push(o);
            }
            Err(e) => {
                failed += 1;
                report_error("label", &e.to_string());
            }
        }
    }
    out.flush()?;
    let hist = polarity_distribution(&ok);
    log::info!(
        "labeled {} tasks: {} positive, {} neutral, {} negative",
        ok.len(),
        hist.totals.positive,
        hist.totals.neutral,
        hist.totals.negative
    );
    if ok.is_empty() && failed > 0 {
        return Err(anyhow!("no task could be labeled"));
    }
    Ok(())
}

fn cmd_build_dataset(c: &BuildDatasetCmd) -> Result<()> {
    let labeler = labeler(c.thresholds.t_pos, c.thresholds.t_neg)?;
    let prompt = prompt_config(&c.budget)?;
    let formats = c
        .formats
        .iter()
        .map(|f| RecordFormat::parse(f).ok_or_else(|| usage(format!("unknown record format {f:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let (repo, index) = load_index(&c.repo, &c.chunk)?;
    let tasks = match &c.tasks {
        Some(p) => instances(p, true, &repo)?,
        None => {
            let cfg = SamplingConfig {
                targets_per_repo: c.per_repo,
                rng_seed: c.seed,
                ..SamplingConfig::default()
            };
            let sampled = sample_targets(&repo, &cfg)?;
            for note in &sampled.report.notes {
                log::warn!("{note}");
            }
            sampled.instances
        }
    };
    let setup = build_backend(&c.backend, &prompt)?;
    let results = label_all(&tasks, &index, &c.retrieval, setup.backend.generator(), &labeler, &prompt, setup.workers)?;
    setup.backend.finish()?;
    let mut items = Vec::new();
    for (inst, r) in tasks.iter().zip(results) {
        match r {
            Ok(o) => items.push(LabeledInstance {
                instance: inst.clone(),
                labeled: o.labeled,
            }),
            Err(e) => report_error("label", &e.to_string()),
        }
    }
    let vcfg = VerbalizeConfig {
        lambda: c.lambda,
        ..VerbalizeConfig::default()
    };
    let built = build_records(&items, &formats, c.seed, c.sufficiency, &vcfg);
    for s in &built.skipped {
        log::info!("skipped {}: {}", s.instance_id, s.reason);
    }
    if built.records.is_empty() {
        let why = built.skipped.first().map_or("no labeled tasks".to_string(), |s| s.reason.clone());
        return Err(anyhow!("no training records produced ({why})"));
    }
    let header = DatasetHeader {
        dataset_version: DATASET_VERSION,
        seed: c.seed,
        formats,
        lambda: c.lambda,
        records: built.records.len(),
    };
    let mut out = output(c.out.as_deref())?;
    formats::write_dataset(&mut out, &header, &built.records)?;
    out.flush()?;
    Ok(())
}

/// Runs the filter for every task; failures are returned per task.
fn filter_all<T: Send>(
    tasks: &[CompletionInstance],
    index: &CrossFileIndex,
    query_window: usize,
    workers: usize,
    f: impl Fn(&CompletionInstance, &dyn Retriever) -> Result<T, EngineError> + Sync,
) -> Result<Vec<Result<T, EngineError>>> {
    Ok(pool(workers)?.install(|| {
        tasks
            .par_iter()
            .map(|inst| f(inst, &index.excluding(&inst.target_path, query_window)))
            .collect()
    }))
}

fn write_traces(path: &Path, rows: Vec<TraceRow>) -> Result<()> {
    let mut out = output(Some(path))?;
    write_jsonl(&mut out, rows)?;
    out.flush()?;
    Ok(())
}

fn fail_if_any(errors: Vec<EngineError>) -> Result<()> {
    let n = errors.len();
    let mut it = errors.into_iter();
    let Some(first) = it.next() else {
        return Ok(());
    };
    for e in it {
        report_error(error_kind(&anyhow::Error::new(e.clone())), &e.to_string());
    }
    Err(anyhow::Error::new(first).context(format!("{n} task(s) failed")))
}

fn cmd_complete(c: &CompleteCmd) -> Result<()> {
    let cfg = engine_config(&c.engine, &c.retrieval, &c.budget)?;
    let (repo, index) = load_index(&c.repo, &c.chunk)?;
    let tasks = instances(&c.tasks, false, &repo)?;
    let setup = build_backend(&c.backend, &cfg.prompt)?;
    let backend = setup.backend.generator();
    let results = filter_all(&tasks, &index, c.retrieval.query_window, setup.workers, |inst, r| {
        engine::run(inst, r, backend, &cfg)
    })?;
    setup.backend.finish()?;
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(res) => {
                rows.push(CompletionRow {
                    instance_id: res.instance_id.clone(),
                    generated: res.generated,
                    kept_ranks: res.trace.kept_ranks(),
                });
                traces.push(TraceRow {
                    instance_id: res.instance_id,
                    trace: res.trace,
                });
            }
            Err(e) => errors.push(e),
        }
    }
    let mut out = output(c.out.as_deref())?;
    write_jsonl(&mut out, rows)?;
    out.flush()?;
    if let Some(p) = &c.trace {
        write_traces(p, traces)?;
    }
    fail_if_any(errors)
}

fn cmd_filter_prompt(c: &FilterPromptCmd) -> Result<()> {
    let cfg = engine_config(&c.engine, &c.retrieval, &c.budget)?;
    let (repo, index) = load_index(&c.repo, &c.chunk)?;
    let tasks = instances(&c.tasks, false, &repo)?;
    let setup = build_backend(&c.backend, &cfg.prompt)?;
    let backend = setup.backend.generator();
    let results = filter_all(&tasks, &index, c.retrieval.query_window, setup.workers, |inst, r| {
        engine::export_filtered_prompt(inst, r, backend, &cfg)
    })?;
    setup.backend.finish()?;
    let mut prompts = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(p) => prompts.push(p),
            Err(e) => errors.push(e),
        }
    }
    formats::write_prompts(&c.out_dir, &prompts)?;
    if let Some(p) = &c.trace {
        let rows = prompts
            .iter()
            .map(|p| TraceRow {
                instance_id: p.instance_id.clone(),
                trace: p.trace.clone(),
            })
            .collect();
        write_traces(p, rows)?;
    }
    fail_if_any(errors)
}

fn cmd_evaluate(c: &EvaluateCmd) -> Result<()> {
    let cfg = engine_config(&c.engine, &c.retrieval, &c.budget)?;
    let labeler = labeler(c.thresholds.t_pos, c.thresholds.t_neg)?;
    let mut kinds = if c.compare {
        vec![StrategyKind::NoRetrieve, StrategyKind::FullRetrieve, StrategyKind::Filtered]
    } else {
        vec![c.strategy.kind()]
    };
    if c.compare && c.prompts_dir.is_some() {
        kinds.push(StrategyKind::ExternalPromptReplay);
    }
    let prompts: BTreeMap<String, String> = match &c.prompts_dir {
        Some(d) => formats::read_prompts(d)?,
        None if kinds.contains(&StrategyKind::ExternalPromptReplay) => {
            return Err(usage("--strategy replay needs --prompts-dir"));
        }
        None => BTreeMap::new(),
    };
    let (repo, index) = load_index(&c.repo, &c.chunk)?;
    let tasks = instances(&c.tasks, true, &repo)?;
    let setup = build_backend(&c.backend, &cfg.prompt)?;
    let backend = setup.backend.generator();
    let workers = pool(setup.workers)?;
    let mut reports = Vec::new();
    for kind in kinds {
        let spec = StrategySpec {
            kind,
            engine: cfg.clone(),
        };
        let rows = workers.install(|| {
            tasks
                .par_iter()
                .map(|inst| {
                    let view = index.excluding(&inst.target_path, c.retrieval.query_window);
                    evaluate_instance(inst, &view, backend, &spec, prompts.get(&inst.id).map(String::as_str))
                })
                .collect()
        });
        reports.push(EvalReport::from_rows(kind, rows));
    }
    let negative = if c.negative_subset {
        let outcomes = label_all(&tasks, &index, &c.retrieval, backend, &labeler, &cfg.prompt, setup.workers)?;
        let ok: Vec<LabelingOutcome> = outcomes.into_iter().filter_map(Result::ok).collect();
        Some(negative_subset(&ok))
    } else {
        None
    };
    setup.backend.finish()?;
    if let Some(p) = &c.out {
        let mut out = output(Some(p))?;
        write_jsonl(&mut out, formats::eval_rows(&reports))?;
        out.flush()?;
    }
    let mut stdout = io::stdout().lock();
    write!(stdout, "{}", summary_table(&reports))?;
    if let Ok(lr) = length_report(&reports) {
        if let Some(ratio) = lr.filtered_over_full {
            writeln!(stdout, "filtered/full cross-file tokens: {ratio:.3}")?;
        }
    }
    if let Some(ids) = negative {
        writeln!(stdout, "negative subset: {} tasks", ids.len())?;
        let subset: Vec<EvalReport> = reports.iter().map(|r| r.subset(&ids)).collect();
        write!(stdout, "{}", summary_table(&subset))?;
    }
    Ok(())
}

fn parse_plant(s: &str) -> Result<PlantSpec> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--plant {s:?}: expected helpful,misleading,irrelevant")))?;
    match parts[..] {
        [h, m, i] => Ok(PlantSpec::new(h, m, i)),
        _ => Err(usage(format!("--plant {s:?}: expected three counts"))),
    }
}

fn cmd_synth(c: &SynthCmd) -> Result<()> {
    let plants = c.plant.iter().map(|p| parse_plant(p)).collect::<Result<Vec<_>>>()?;
    if plants.is_empty() {
        return Err(usage("at least one --plant is required"));
    }
    let corpus = synth_corpus(c.seed, c.instances, &plants);
    let repo_dir = c.out_dir.join("repo");
    if repo_dir.exists() {
        fs::remove_dir_all(&repo_dir).with_context(|| format!("clearing {}", repo_dir.display()))?;
    }
    write_repo(&repo_dir, &corpus.repo).with_context(|| format!("writing {}", repo_dir.display()))?;
    let mut tasks = output(Some(&c.out_dir.join("tasks.jsonl")))?;
    write_tasks(&mut tasks, &corpus.instances)?;
    tasks.flush()?;
    let mut plants_out = output(Some(&c.out_dir.join("plants.jsonl")))?;
    write_jsonl(&mut plants_out, &corpus.plants)?;
    plants_out.flush()?;
    let mut oracle = serde_json::to_string_pretty(&corpus.oracle_entries)?;
    oracle.push('\n');
    fs::write(c.out_dir.join("oracle.json"), oracle)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_defaults_match_documented_values() {
        let mut cmd = Cli::command();
        let help = cmd.find_subcommand_mut("evaluate").unwrap().render_long_help().to_string();
        for needle in [
            "--window <WINDOW>",
            "[default: 10]",
            "[default: 5]",
            "[default: 0.3]",
            "[default: 4096]",
            "[default: 1024]",
            "[default: 3072]",
            "[default: 0.1]",
            "[default: -0.05]",
        ] {
            assert!(help.contains(needle), "missing {needle}");
        }
    }

    #[test]
    fn plant_parsing() {
        let p = parse_plant("1, 0,8").unwrap();
        assert_eq!((p.helpful, p.misleading, p.irrelevant), (1, 0, 8));
        assert!(parse_plant("1,2").is_err());
        assert!(parse_plant("a,b,c").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
