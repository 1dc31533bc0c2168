//! Per-question execution of the sliding-window protocol and the fixed
//! baseline, plus the line-delimited run log.
//!
//! Iterative mode walks the windows in order and stops at the first `found`
//! prediction. Abstentions and malformed outputs both move on to the next
//! window. Fixed mode sends the first `fixed_size` ranked pages in a single
//! prompt.
//!
//! # Run log
//!
//! One JSON object per line, camelCase keys:
//!
//! | field               | type                                              |
//! |---------------------|---------------------------------------------------|
//! | `questionId`        | string                                            |
//! | `mode`              | `"iterative"`, `"fixed"` or `"negativeProbe"`     |
//! | `backend`           | string                                            |
//! | `steps`             | array of step objects (below)                     |
//! | `finalAnswer`       | string or null                                    |
//! | `stoppedAt`         | window ordinal (number), `"exhausted"`, `"failed"`|
//! | `firstPositive`     | ordinal of the first positive window, or null     |
//! | `windowCount`       | number of windows available to the run            |
//! | `totalPromptTokens` | sum of step `promptTokens`                        |
//! | `totalOutputTokens` | sum of step `outputTokens`                        |
//! | `error`             | `{kind, message}` or null                         |
//!
//! Step objects carry `windowOrdinal`, `windowLabel` (`"positive"` or
//! `"negative"`), `pageIds`, `promptTokens`, `outputTokens`,
//! `tokensEstimated`, `prediction` (null on failure) and `error`.
//! Token counts are WordPiece tokens unless the remote backend reported its
//! own.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bm25::{Index, RetrievalConfig};
use crate::corpus::{Corpus, Page, QAExample};
use crate::llm::{GenConfig, GenerationRequest, LlmBackend, LlmError};
use crate::parsing::{parse_completion, Prediction, PredictionKind};
use crate::prompting::{build_prompt, build_shots, Exemplar, PromptError, PromptTemplate};
use crate::windowing::{
    construct_negative_window, first_positive_ordinal, label_for, make_windows, normalized_aliases, resolve_pages,
    Window, WindowConfig, WindowLabel,
};
use crate::wordpiece::Vocab;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Shots(#[from] PromptError),
    #[error("run log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("run log line {line}: {message}")]
    Log { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum RunMode {
    #[default]
    Iterative,
    Fixed,
    /// One prompt on a constructed negative window.
    NegativeProbe,
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "iterative" => Ok(Self::Iterative),
            "fixed" => Ok(Self::Fixed),
            other => Err(format!("unknown mode {other:?} (expected iterative or fixed)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub window: WindowConfig,
    pub retrieval: RetrievalConfig,
    pub shots: usize,
    pub gen: GenConfig,
    pub mode: RunMode,
    pub fixed_size: usize,
    pub workers: usize,
    /// Seeds exemplar selection.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            retrieval: RetrievalConfig::default(),
            shots: 0,
            gen: GenConfig::default(),
            mode: RunMode::Iterative,
            fixed_size: 200,
            workers: 1,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let fail = |m: String| Err(RunError::Config(m));
        if self.window.window_size == 0 {
            return fail("window size must be at least 1".into());
        }
        if self.retrieval.top_k == 0 {
            return fail("top-k must be at least 1".into());
        }
        if self.workers == 0 {
            return fail("worker count must be at least 1".into());
        }
        if !self.shots.is_multiple_of(2) {
            return fail(format!("shot count must be even, got {}", self.shots));
        }
        if self.mode == RunMode::Fixed && (self.fixed_size == 0 || self.fixed_size > self.retrieval.top_k) {
            return fail(format!(
                "fixed size {} must be between 1 and top-k {}",
                self.fixed_size, self.retrieval.top_k
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ErrorKind {
    Transport,
    Status,
    Response,
    Config,
    Data,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    pub kind: ErrorKind,
    pub message: String,
}

impl From<&LlmError> for RecordError {
    fn from(e: &LlmError) -> Self {
        let kind = match e {
            LlmError::Transport { .. } => ErrorKind::Transport,
            LlmError::Status { .. } => ErrorKind::Status,
            LlmError::InvalidResponse(_) => ErrorKind::Response,
            LlmError::Config(_) => ErrorKind::Config,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepRecord {
    pub window_ordinal: usize,
    pub window_label: WindowLabel,
    pub page_ids: Vec<String>,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    pub tokens_estimated: bool,
    pub prediction: Option<Prediction>,
    pub error: Option<RecordError>,
}

impl StepRecord {
    pub fn kind(&self) -> Option<PredictionKind> {
        self.prediction.as_ref().map(|p| p.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopPoint {
    Answered(usize),
    Exhausted,
    Failed,
}

impl Serialize for StopPoint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            StopPoint::Answered(n) => s.serialize_u64(*n as u64),
            StopPoint::Exhausted => s.serialize_str("exhausted"),
            StopPoint::Failed => s.serialize_str("failed"),
        }
    }
}

impl<'de> Deserialize<'de> for StopPoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Ordinal(usize),
            Marker(String),
        }
        match Raw::deserialize(d)? {
            Raw::Ordinal(n) => Ok(StopPoint::Answered(n)),
            Raw::Marker(m) if m == "exhausted" => Ok(StopPoint::Exhausted),
            Raw::Marker(m) if m == "failed" => Ok(StopPoint::Failed),
            Raw::Marker(m) => Err(serde::de::Error::custom(format!("unknown stop marker {m:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunRecord {
    pub question_id: String,
    pub mode: RunMode,
    pub backend: String,
    pub steps: Vec<StepRecord>,
    pub final_answer: Option<String>,
    pub stopped_at: StopPoint,
    pub first_positive: Option<usize>,
    pub window_count: usize,
    pub total_prompt_tokens: usize,
    pub total_output_tokens: usize,
    pub error: Option<RecordError>,
}

impl RunRecord {
    /// The prediction that produced the final answer.
    pub fn final_prediction(&self) -> Option<&Prediction> {
        self.steps
            .iter()
            .rev()
            .filter_map(|s| s.prediction.as_ref())
            .find(|p| p.kind == PredictionKind::Found)
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Everything a run reads but never mutates.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a Index,
    pub vocab: &'a Vocab,
    pub template: &'a PromptTemplate,
    pub exemplars: &'a [Exemplar],
    pub backend: &'a dyn LlmBackend,
}

struct Recorder {
    record: RunRecord,
}

impl Recorder {
    fn new(example: &QAExample, mode: RunMode, backend: &str) -> Self {
        Self {
            record: RunRecord {
                question_id: example.id.clone(),
                mode,
                backend: backend.to_owned(),
                steps: Vec::new(),
                final_answer: None,
                stopped_at: StopPoint::Exhausted,
                first_positive: None,
                window_count: 0,
                total_prompt_tokens: 0,
                total_output_tokens: 0,
                error: None,
            },
        }
    }

    fn fail(mut self, kind: ErrorKind, message: String) -> RunRecord {
        self.record.stopped_at = StopPoint::Failed;
        self.record.error = Some(RecordError { kind, message });
        self.record
    }

    /// Prompts the backend on one window; returns whether iteration should
    /// stop and whether the step failed.
    fn step(
        &mut self,
        pipeline: &Pipeline<'_>,
        cfg: &RunConfig,
        shots: &[Exemplar],
        window: &Window<'_>,
        example: &QAExample,
    ) -> Result<bool, ()> {
        let prompt = build_prompt(pipeline.template, shots, window, &example.question, pipeline.vocab);
        let req = GenerationRequest {
            prompt: &prompt,
            window,
            example,
        };
        let mut step = StepRecord {
            window_ordinal: window.ordinal,
            window_label: window.label,
            page_ids: window.page_ids(),
            prompt_tokens: 0,
            output_tokens: 0,
            tokens_estimated: false,
            prediction: None,
            error: None,
        };
        match pipeline.backend.generate(&req, &cfg.gen) {
            Ok(c) => {
                step.prompt_tokens = c.prompt_tokens;
                step.output_tokens = c.output_tokens;
                step.tokens_estimated = c.tokens_estimated;
                let prediction = parse_completion(&c.text);
                let found = prediction.kind == PredictionKind::Found;
                if found {
                    self.record.final_answer = prediction.answer.clone();
                    self.record.stopped_at = StopPoint::Answered(window.ordinal);
                }
                step.prediction = Some(prediction);
                self.push(step);
                Ok(found)
            }
            Err(e) => {
                let err = RecordError::from(&e);
                step.error = Some(err.clone());
                self.push(step);
                self.record.stopped_at = StopPoint::Failed;
                self.record.error = Some(err);
                Err(())
            }
        }
    }

    fn push(&mut self, step: StepRecord) {
        self.record.total_prompt_tokens += step.prompt_tokens;
        self.record.total_output_tokens += step.output_tokens;
        self.record.steps.push(step);
    }
}

fn shots_for(pipeline: &Pipeline<'_>, cfg: &RunConfig) -> Result<Vec<Exemplar>, RunError> {
    Ok(build_shots(pipeline.exemplars, cfg.shots, cfg.seed)?)
}

fn run_iterative_with(example: &QAExample, pipeline: &Pipeline<'_>, cfg: &RunConfig, shots: &[Exemplar]) -> RunRecord {
    let mut rec = Recorder::new(example, RunMode::Iterative, pipeline.backend.name());
    let ranked = pipeline
        .index
        .retrieve(&example.id, &example.question, pipeline.vocab, &cfg.retrieval);
    let windows = match make_windows(&ranked, pipeline.corpus, example, &cfg.window) {
        Ok(w) => w,
        Err(e) => return rec.fail(ErrorKind::Data, e.to_string()),
    };
    rec.record.window_count = windows.len();
    rec.record.first_positive = first_positive_ordinal(&windows);
    for window in &windows {
        match rec.step(pipeline, cfg, shots, window, example) {
            Ok(true) | Err(()) => break,
            Ok(false) => {}
        }
    }
    rec.record
}

fn run_fixed_with(example: &QAExample, pipeline: &Pipeline<'_>, cfg: &RunConfig, shots: &[Exemplar]) -> RunRecord {
    let mut rec = Recorder::new(example, RunMode::Fixed, pipeline.backend.name());
    let ranked = pipeline
        .index
        .retrieve(&example.id, &example.question, pipeline.vocab, &cfg.retrieval);
    let mut pages: Vec<&Page> = match resolve_pages(&ranked, pipeline.corpus) {
        Ok(p) => p,
        Err(e) => return rec.fail(ErrorKind::Data, e.to_string()),
    };
    pages.truncate(cfg.fixed_size);
    if pages.is_empty() {
        return rec.record;
    }
    let window = Window {
        ordinal: 0,
        label: label_for(&pages, example, &normalized_aliases(example)),
        pages,
    };
    rec.record.window_count = 1;
    rec.record.first_positive = window.is_positive().then_some(0);
    let _ = rec.step(pipeline, cfg, shots, &window, example);
    rec.record
}

/// Iterative sliding-window run for one question.
pub fn run_iterative(example: &QAExample, pipeline: &Pipeline<'_>, cfg: &RunConfig) -> Result<RunRecord, RunError> {
    cfg.validate()?;
    let shots = shots_for(pipeline, cfg)?;
    Ok(run_iterative_with(example, pipeline, cfg, &shots))
}

/// Single prompt over the first `fixed_size` ranked pages.
pub fn run_fixed(example: &QAExample, pipeline: &Pipeline<'_>, cfg: &RunConfig) -> Result<RunRecord, RunError> {
    cfg.validate()?;
    let shots = shots_for(pipeline, cfg)?;
    Ok(run_fixed_with(example, pipeline, cfg, &shots))
}

/// Queries the backend once on the example's constructed negative window.
/// `None` when every window of the ranked list holds a relevant page.
pub fn probe_negative(
    example: &QAExample,
    pipeline: &Pipeline<'_>,
    cfg: &RunConfig,
    shots: &[Exemplar],
) -> Option<RunRecord> {
    let mut rec = Recorder::new(example, RunMode::NegativeProbe, pipeline.backend.name());
    let ranked = pipeline
        .index
        .retrieve(&example.id, &example.question, pipeline.vocab, &cfg.retrieval);
    let window = match construct_negative_window(&ranked, pipeline.corpus, example, cfg.window.window_size) {
        Ok(Some(w)) => w,
        Ok(None) => return None,
        Err(e) => return Some(rec.fail(ErrorKind::Data, e.to_string())),
    };
    rec.record.window_count = 1;
    let _ = rec.step(pipeline, cfg, shots, &window, example);
    Some(rec.record)
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, RunError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RunError::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// One record per example, in dataset order whatever the worker count.
pub fn run_dataset(
    dataset: &[QAExample],
    pipeline: &Pipeline<'_>,
    cfg: &RunConfig,
) -> Result<Vec<RunRecord>, RunError> {
    cfg.validate()?;
    let shots = shots_for(pipeline, cfg)?;
    in_pool(cfg.workers, || {
        dataset
            .par_iter()
            .map(|ex| match cfg.mode {
                RunMode::Fixed => run_fixed_with(ex, pipeline, cfg, &shots),
                _ => run_iterative_with(ex, pipeline, cfg, &shots),
            })
            .collect()
    })
}

/// Negative-window probe over a dataset; examples without a negative window
/// are skipped.
pub fn run_negative_probes(
    dataset: &[QAExample],
    pipeline: &Pipeline<'_>,
    cfg: &RunConfig,
) -> Result<Vec<RunRecord>, RunError> {
    cfg.validate()?;
    let shots = shots_for(pipeline, cfg)?;
    in_pool(cfg.workers, || {
        dataset
            .par_iter()
            .filter_map(|ex| probe_negative(ex, pipeline, cfg, &shots))
            .collect()
    })
}

pub fn write_run_log(records: &[RunRecord], path: impl AsRef<Path>) -> Result<(), RunError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_run_log(path: impl AsRef<Path>) -> Result<Vec<RunRecord>, RunError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RunError::Log {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
