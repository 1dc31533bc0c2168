//! Command-line entry point.
//!
//! Settings come from an optional TOML file (`--config`) and are overridden
//! by flags. Paths in the file are relative to the file's directory. The API
//! token for the HTTP backend is read from `WINRAG_API_TOKEN` only.
//!
//! ```toml
//! force = false
//!
//! [paths]
//! corpus = "corpus.jsonl"
//! dataset = "dataset.jsonl"
//! vocab = "vocab.txt"
//! index = "index"
//! template = "template.txt"    # optional, bundled template otherwise
//! exemplars = "shots.jsonl"    # needed when shots > 0
//! out = "out"
//!
//! [run]
//! window_size = 60
//! top_k = 200
//! order = "forward"
//! max_windows = 4
//! shots = 0
//! mode = "iterative"
//! fixed_size = 200
//! workers = 1
//! seed = 0
//! k1 = 0.9
//! b = 0.8
//!
//! [backend]
//! kind = "oracle"              # oracle | hallucinator | http
//! endpoint = "http://localhost:8080/generate"
//! model = "some-model"
//! false_answer_prob = 0.543
//! timeout_secs = 60
//! retries = 2
//! max_output_tokens = 256
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::bm25::{build_index, load_index, save_index, Bm25Params, Index};
use crate::corpus::{load_corpus, load_dataset, validate_links, Corpus, QAExample};
use crate::eval::{ablate, aggregate, negative_rejection_accuracy, report, AblationTable, Axis, Metrics, ReportFormat};
use crate::llm::{HallucinatorBackend, HallucinatorConfig, HttpBackend, HttpSettings, LlmBackend, OracleBackend};
use crate::orchestrator::{
    read_run_log, run_dataset, run_negative_probes, write_run_log, ErrorKind, Pipeline, RunConfig, RunMode, RunRecord,
};
use crate::prompting::{load_exemplars, Exemplar, PromptTemplate};
use crate::windowing::WindowOrder;
use crate::wordpiece::{load_vocab, Vocab};

pub const TOKEN_ENV: &str = "WINRAG_API_TOKEN";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("backend unreachable: {0}")]
    Unreachable(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Unreachable(_) => 2,
        }
    }
}

fn cfg_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "winrag",
    version,
    about = "Sliding-window retrieval QA over a page collection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the BM25 index over the corpus.
    BuildIndex(Common),
    /// Print the ranked pages for one question.
    Retrieve {
        #[command(flatten)]
        common: Common,
        /// Dataset example id to look up.
        #[arg(long, conflicts_with = "question")]
        question_id: Option<String>,
        /// Free-text question.
        #[arg(long)]
        question: Option<String>,
    },
    /// Run the pipeline over the dataset and write the run log and report.
    Run(Common),
    /// Run the dataset once per value of one axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// window-size, order, shots or fixed-size.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Query the backend once per constructed negative window.
    Negatives(Common),
    /// Score an existing run log.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run log to score.
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    Hallucinator,
    Http,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Index directory.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Few-shot exemplar pool.
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub window_size: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub order: Option<String>,
    #[arg(long)]
    pub max_windows: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub fixed_size: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Hallucinator fabrication probability on negative windows.
    #[arg(long)]
    pub false_answer_prob: Option<f64>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long)]
    pub max_output_tokens: Option<usize>,
    /// Overwrite an existing index directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    force: bool,
    #[serde(default)]
    paths: FilePaths,
    #[serde(default)]
    run: FileRun,
    #[serde(default)]
    backend: FileBackend,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePaths {
    corpus: Option<PathBuf>,
    dataset: Option<PathBuf>,
    vocab: Option<PathBuf>,
    index: Option<PathBuf>,
    template: Option<PathBuf>,
    exemplars: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRun {
    window_size: Option<usize>,
    top_k: Option<usize>,
    order: Option<String>,
    max_windows: Option<usize>,
    shots: Option<usize>,
    mode: Option<String>,
    fixed_size: Option<usize>,
    workers: Option<usize>,
    seed: Option<u64>,
    k1: Option<f64>,
    b: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileBackend {
    kind: Option<BackendKind>,
    endpoint: Option<String>,
    model: Option<String>,
    false_answer_prob: Option<f64>,
    timeout_secs: Option<u64>,
    retries: Option<u32>,
    max_output_tokens: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct AppPaths {
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub exemplars: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub hallucinator: HallucinatorConfig,
}

/// Fully merged settings.
#[derive(Debug, Clone)]
pub struct AppConfig {
    pub paths: AppPaths,
    pub run: RunConfig,
    pub bm25: Bm25Params,
    pub backend: BackendSettings,
    pub force: bool,
}

fn require<'p>(path: &'p Option<PathBuf>, what: &str) -> Result<&'p Path, CliError> {
    let p = path
        .as_deref()
        .ok_or_else(|| cfg_err(format!("no {what} path given (flag --{what} or [paths] {what})")))?;
    if !p.exists() {
        return Err(cfg_err(format!("{what} path {} does not exist", p.display())));
    }
    Ok(p)
}

impl AppConfig {
    pub fn resolve(common: &Common) -> Result<Self, CliError> {
        let (file, base) = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
                let parsed: FileConfig =
                    toml::from_str(&text).map_err(|e| cfg_err(format!("config {}: {e}", path.display())))?;
                let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (parsed, dir)
            }
            None => (FileConfig::default(), PathBuf::new()),
        };
        let rel = |p: &Option<PathBuf>| p.as_ref().map(|p| base.join(p));
        let pick = |flag: &Option<PathBuf>, file: &Option<PathBuf>| flag.clone().or_else(|| rel(file));
        let fp = &file.paths;
        let paths = AppPaths {
            corpus: pick(&common.corpus, &fp.corpus),
            dataset: pick(&common.dataset, &fp.dataset),
            vocab: pick(&common.vocab, &fp.vocab),
            index: pick(&common.index, &fp.index),
            template: pick(&common.template, &fp.template),
            exemplars: pick(&common.exemplars, &fp.exemplars),
            out: pick(&common.out, &fp.out).unwrap_or_else(|| PathBuf::from("out")),
        };

        let fr = &file.run;
        let mut run = RunConfig::default();
        if let Some(v) = common.window_size.or(fr.window_size) {
            run.window.window_size = v;
        }
        if let Some(v) = common.top_k.or(fr.top_k) {
            run.retrieval.top_k = v;
        }
        if let Some(v) = common.order.as_ref().or(fr.order.as_ref()) {
            run.window.order = v.parse::<WindowOrder>().map_err(cfg_err)?;
        }
        run.window.max_windows = common.max_windows.or(fr.max_windows);
        if let Some(v) = common.shots.or(fr.shots) {
            run.shots = v;
        }
        if let Some(v) = common.mode.as_ref().or(fr.mode.as_ref()) {
            run.mode = v.parse::<RunMode>().map_err(cfg_err)?;
        }
        if let Some(v) = common.fixed_size.or(fr.fixed_size) {
            run.fixed_size = v;
        }
        if let Some(v) = common.workers.or(fr.workers) {
            run.workers = v;
        }
        if let Some(v) = common.seed.or(fr.seed) {
            run.seed = v;
        }
        let fb = &file.backend;
        if let Some(v) = common.timeout_secs.or(fb.timeout_secs) {
            run.gen.request_timeout = Duration::from_secs(v);
        }
        if let Some(v) = common.retries.or(fb.retries) {
            run.gen.retries = v;
        }
        if let Some(v) = common.max_output_tokens.or(fb.max_output_tokens) {
            run.gen.max_output_tokens = v;
        }

        let mut bm25 = Bm25Params::default();
        if let Some(v) = common.k1.or(fr.k1) {
            bm25.k1 = v;
        }
        if let Some(v) = common.b.or(fr.b) {
            bm25.b = v;
        }
        bm25.validate().map_err(cfg_err)?;

        let hallucinator = HallucinatorConfig {
            false_answer_prob: common
                .false_answer_prob
                .or(fb.false_answer_prob)
                .unwrap_or(HallucinatorConfig::default().false_answer_prob),
            seed: run.seed,
        };
        hallucinator.validate().map_err(cfg_err)?;
        let backend = BackendSettings {
            kind: common.backend.or(fb.kind).unwrap_or(BackendKind::Oracle),
            endpoint: common.endpoint.clone().or_else(|| fb.endpoint.clone()),
            model: common.model.clone().or_else(|| fb.model.clone()),
            hallucinator,
        };
        if backend.kind == BackendKind::Http && backend.endpoint.is_none() {
            return Err(cfg_err("the http backend needs --endpoint or [backend] endpoint"));
        }
        Ok(Self {
            paths,
            run,
            bm25,
            backend,
            force: common.force || file.force,
        })
    }
}

pub fn run_cli(cli: Cli) -> ExitCode {
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildIndex(common) => cmd_build_index(&AppConfig::resolve(&common)?),
        Command::Retrieve {
            common,
            question_id,
            question,
        } => cmd_retrieve(&AppConfig::resolve(&common)?, question_id, question),
        Command::Run(common) => cmd_run(&AppConfig::resolve(&common)?),
        Command::Ablate { common, axis, values } => {
            let axis: Axis = axis.parse().map_err(cfg_err)?;
            cmd_ablate(&AppConfig::resolve(&common)?, axis, &values)
        }
        Command::Negatives(common) => cmd_negatives(&AppConfig::resolve(&common)?),
        Command::Report { common, log } => cmd_report(&AppConfig::resolve(&common)?, &log),
    }
}

fn load_vocab_at(cfg: &AppConfig) -> Result<Vocab, CliError> {
    let path = require(&cfg.paths.vocab, "vocab")?;
    load_vocab(path).map_err(io_err)
}

fn load_index_at(cfg: &AppConfig, vocab: &Vocab) -> Result<Index, CliError> {
    let dir = require(&cfg.paths.index, "index")?;
    let index = load_index(dir).map_err(io_err)?;
    index.ensure_vocab(vocab).map_err(cfg_err)?;
    Ok(index)
}

pub fn cmd_build_index(cfg: &AppConfig) -> Result<(), CliError> {
    let corpus = load_corpus(require(&cfg.paths.corpus, "corpus")?).map_err(io_err)?;
    let vocab = load_vocab_at(cfg)?;
    let dir = cfg
        .paths
        .index
        .as_deref()
        .ok_or_else(|| cfg_err("no index path given (flag --index or [paths] index)"))?;
    if dir.exists() && !cfg.force {
        return Err(cfg_err(format!(
            "index directory {} already exists; pass --force to rebuild",
            dir.display()
        )));
    }
    let index = build_index(&corpus, &vocab, cfg.bm25).map_err(cfg_err)?;
    save_index(&index, dir).map_err(io_err)?;
    println!(
        "indexed {} pages, avgdl {:.4}, vocab size {}",
        index.num_docs(),
        index.avgdl(),
        index.vocab_size()
    );
    Ok(())
}

pub fn cmd_retrieve(cfg: &AppConfig, question_id: Option<String>, question: Option<String>) -> Result<(), CliError> {
    let vocab = load_vocab_at(cfg)?;
    let index = load_index_at(cfg, &vocab)?;
    let (qid, text) = match (question_id, question) {
        (Some(id), _) => {
            let dataset = load_dataset(require(&cfg.paths.dataset, "dataset")?).map_err(io_err)?;
            let ex = dataset
                .into_iter()
                .find(|e| e.id == id)
                .ok_or_else(|| cfg_err(format!("no example with id {id:?}")))?;
            (ex.id, ex.question)
        }
        (None, Some(q)) => ("adhoc".to_owned(), q),
        (None, None) => return Err(cfg_err("pass --question-id or --question")),
    };
    let ranked = index.retrieve(&qid, &text, &vocab, &cfg.run.retrieval);
    for (rank, e) in ranked.entries.iter().enumerate() {
        println!("{rank}\t{}\t{:.6}", e.page_id, e.score);
    }
    Ok(())
}

struct Loaded {
    corpus: Corpus,
    dataset: Vec<QAExample>,
    vocab: Arc<Vocab>,
    index: Index,
    template: PromptTemplate,
    exemplars: Vec<Exemplar>,
    backend: Box<dyn LlmBackend>,
}

impl Loaded {
    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline {
            corpus: &self.corpus,
            index: &self.index,
            vocab: &self.vocab,
            template: &self.template,
            exemplars: &self.exemplars,
            backend: self.backend.as_ref(),
        }
    }
}

fn load_all(cfg: &AppConfig, need_shots: bool) -> Result<Loaded, CliError> {
    let corpus = load_corpus(require(&cfg.paths.corpus, "corpus")?).map_err(io_err)?;
    let dataset = load_dataset(require(&cfg.paths.dataset, "dataset")?).map_err(io_err)?;
    let links = validate_links(&corpus, &dataset);
    if !links.ok() {
        tracing::warn!(
            dangling = links.dangling.len(),
            "gold page ids missing from the corpus; they cannot count as relevant"
        );
    }
    let vocab = Arc::new(load_vocab_at(cfg)?);
    let index = load_index_at(cfg, &vocab)?;
    let template = match &cfg.paths.template {
        Some(_) => PromptTemplate::load(require(&cfg.paths.template, "template")?).map_err(cfg_err)?,
        None => PromptTemplate::default(),
    };
    let exemplars = match &cfg.paths.exemplars {
        Some(_) => load_exemplars(require(&cfg.paths.exemplars, "exemplars")?, &corpus).map_err(cfg_err)?,
        None if need_shots => return Err(cfg_err("shots > 0 needs an exemplar pool (--exemplars)")),
        None => Vec::new(),
    };
    let backend: Box<dyn LlmBackend> = match cfg.backend.kind {
        BackendKind::Oracle => Box::new(OracleBackend::new(vocab.clone())),
        BackendKind::Hallucinator => {
            Box::new(HallucinatorBackend::new(vocab.clone(), cfg.backend.hallucinator).map_err(cfg_err)?)
        }
        BackendKind::Http => {
            let settings = HttpSettings {
                endpoint: cfg.backend.endpoint.clone().unwrap_or_default(),
                model: cfg.backend.model.clone(),
                token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
                backoff: Duration::from_millis(500),
            };
            Box::new(HttpBackend::new(settings, vocab.clone()).map_err(cfg_err)?)
        }
    };
    Ok(Loaded {
        corpus,
        dataset,
        vocab,
        index,
        template,
        exemplars,
        backend,
    })
}

fn ensure_out(cfg: &AppConfig) -> Result<&Path, CliError> {
    let out = cfg.paths.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| io_err(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

/// Exit 2 when every example failed because the endpoint was unreachable.
fn check_reachable(records: &[RunRecord]) -> Result<(), CliError> {
    let transport = |r: &RunRecord| r.error.as_ref().is_some_and(|e| e.kind == ErrorKind::Transport);
    if !records.is_empty() && records.iter().all(transport) {
        let msg = records[0].error.as_ref().map(|e| e.message.clone()).unwrap_or_default();
        return Err(CliError::Unreachable(msg));
    }
    Ok(())
}

fn write_reports(table: &AblationTable, out: &Path, stem: &str) -> Result<(), CliError> {
    report(table, ReportFormat::Csv, out.join(format!("{stem}.csv"))).map_err(io_err)?;
    report(table, ReportFormat::TextTable, out.join(format!("{stem}.txt"))).map_err(io_err)?;
    Ok(())
}

fn print_summary(m: &Metrics) {
    println!(
        "n={} em={:.4} answered={:.4} neg_rejection={:.4} mean_neg_before_positive={:.4} mean_prompt_wp_tokens={:.1} failed={}",
        m.n, m.em, m.answered_rate, m.neg_rejection_acc, m.mean_neg_before_positive, m.mean_prompt_tokens, m.failed
    );
}

pub fn cmd_run(cfg: &AppConfig) -> Result<(), CliError> {
    let loaded = load_all(cfg, cfg.run.shots > 0)?;
    let out = ensure_out(cfg)?;
    let records = run_dataset(&loaded.dataset, &loaded.pipeline(), &cfg.run).map_err(cfg_err)?;
    write_run_log(&records, out.join("run.jsonl")).map_err(io_err)?;
    let metrics = aggregate(&records, &loaded.dataset).map_err(cfg_err)?;
    write_reports(&AblationTable::single(metrics.clone()), out, "report")?;
    print_summary(&metrics);
    check_reachable(&records)
}

pub fn cmd_ablate(cfg: &AppConfig, axis: Axis, values: &[String]) -> Result<(), CliError> {
    let need_shots = cfg.run.shots > 0 || (axis == Axis::Shots && values.iter().any(|v| v.trim() != "0"));
    let loaded = load_all(cfg, need_shots)?;
    let out = ensure_out(cfg)?;
    let table = ablate(axis, values, &cfg.run, &loaded.dataset, &loaded.pipeline()).map_err(cfg_err)?;
    write_reports(&table, out, &format!("ablation_{}", axis.name()))?;
    print!("{}", crate::eval::render_text(&table));
    Ok(())
}

pub fn cmd_negatives(cfg: &AppConfig) -> Result<(), CliError> {
    let loaded = load_all(cfg, cfg.run.shots > 0)?;
    let out = ensure_out(cfg)?;
    let records = run_negative_probes(&loaded.dataset, &loaded.pipeline(), &cfg.run).map_err(cfg_err)?;
    if records.is_empty() {
        return Err(cfg_err(format!(
            "0 eligible examples: every window of size {} holds a relevant page",
            cfg.run.window.window_size
        )));
    }
    write_run_log(&records, out.join("negatives.jsonl")).map_err(io_err)?;
    check_reachable(&records)?;
    let acc = negative_rejection_accuracy(&records).map_err(cfg_err)?;
    println!("eligible={} rejection_accuracy={acc:.4}", records.len());
    Ok(())
}

pub fn cmd_report(cfg: &AppConfig, log: &Path) -> Result<(), CliError> {
    let dataset = load_dataset(require(&cfg.paths.dataset, "dataset")?).map_err(io_err)?;
    let records = read_run_log(log).map_err(io_err)?;
    let metrics = aggregate(&records, &dataset).map_err(cfg_err)?;
    let out = ensure_out(cfg)?;
    write_reports(&AblationTable::single(metrics.clone()), out, "report")?;
    print_summary(&metrics);
    Ok(())
}
