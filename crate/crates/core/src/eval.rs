//! Scoring, ablations and report tables.
//!
//! Exact match uses the usual open-domain QA normalization: lowercase, drop
//! punctuation, drop the whole words "a", "an" and "the", collapse
//! whitespace. EM numbers are sensitive to this choice.
//!
//! # CSV layout (version 1)
//!
//! Header row, then one row per axis value:
//!
//! `<axis>,n,em,answered_rate,neg_rejection_acc,negative_steps,mean_neg_before_positive,without_positive,mean_prompt_wp_tokens,mean_output_wp_tokens,malformed_rate,failed,error`
//!
//! The first column is named after the ablation axis (`run` for a single
//! run). Rates and means carry four decimals; counts are integers. A row whose
//! run failed has empty numeric cells and the message in `error`. Token
//! columns count WordPiece tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::QAExample;
use crate::orchestrator::{run_dataset, Pipeline, RunConfig, RunMode, RunRecord};
use crate::parsing::{Prediction, PredictionKind};
use crate::windowing::{WindowLabel, WindowOrder};

pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no negative-window steps to score")]
    NoNegativeSteps,
    #[error("record {0:?} has no matching dataset example")]
    UnknownExample(String),
    #[error("unknown ablation axis {0:?} (valid: window-size, order, shots, fixed-size)")]
    UnknownAxis(String),
    #[error("ablation needs at least one value")]
    NoValues,
    #[error("cannot write report {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_ascii() && !c.is_alphanumeric() && !c.is_whitespace() && is_unicode_punct(c))
}

fn is_unicode_punct(c: char) -> bool {
    use unicode_general_category::{get_general_category, GeneralCategory as G};
    matches!(
        get_general_category(c),
        G::ConnectorPunctuation
            | G::DashPunctuation
            | G::OpenPunctuation
            | G::ClosePunctuation
            | G::InitialPunctuation
            | G::FinalPunctuation
            | G::OtherPunctuation
    )
}

/// Answer normalization for exact match and answer-string relevance.
///
/// Punctuation is removed before articles so the result is idempotent.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text.to_lowercase().chars().filter(|&c| !is_punct(c)).collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &Prediction, example: &QAExample) -> u8 {
    if prediction.kind != PredictionKind::Found {
        return 0;
    }
    let Some(answer) = &prediction.answer else {
        return 0;
    };
    let norm = normalize_answer(answer);
    u8::from(example.answers.iter().any(|g| normalize_answer(g) == norm))
}

/// Fraction of negative-window steps answered with an abstention.
pub fn negative_rejection_accuracy(records: &[RunRecord]) -> Result<f64, EvalError> {
    let (total, rejected) = negative_counts(records);
    if total == 0 {
        return Err(EvalError::NoNegativeSteps);
    }
    Ok(rejected as f64 / total as f64)
}

fn negative_counts(records: &[RunRecord]) -> (usize, usize) {
    let mut total = 0;
    let mut rejected = 0;
    for step in records.iter().flat_map(|r| &r.steps) {
        if step.window_label != WindowLabel::Negative || step.prediction.is_none() {
            continue;
        }
        total += 1;
        if step.kind() == Some(PredictionKind::NotFound) {
            rejected += 1;
        }
    }
    (total, rejected)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub n: usize,
    pub em: f64,
    pub answered_rate: f64,
    /// Zero when `negative_steps` is zero.
    pub neg_rejection_acc: f64,
    pub negative_steps: usize,
    /// Averaged over examples with at least one positive window.
    pub mean_neg_before_positive: f64,
    pub without_positive: usize,
    pub mean_prompt_tokens: f64,
    pub mean_output_tokens: f64,
    /// Malformed predictions over all scored steps.
    pub malformed_rate: f64,
    pub failed: usize,
    /// Set when there were no records; every mean is then reported as zero.
    pub empty: bool,
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn aggregate(records: &[RunRecord], dataset: &[QAExample]) -> Result<Metrics, EvalError> {
    let by_id: HashMap<&str, &QAExample> = dataset.iter().map(|e| (e.id.as_str(), e)).collect();
    let n = records.len();
    let mut em = 0usize;
    let mut answered = 0usize;
    let mut nbp_sum = 0usize;
    let mut with_positive = 0usize;
    let mut prompt_sum = 0usize;
    let mut output_sum = 0usize;
    let mut steps = 0usize;
    let mut malformed = 0usize;
    let mut failed = 0usize;
    for r in records {
        let ex = by_id
            .get(r.question_id.as_str())
            .ok_or_else(|| EvalError::UnknownExample(r.question_id.clone()))?;
        if let Some(p) = r.final_prediction() {
            answered += 1;
            em += usize::from(exact_match(p, ex));
        }
        if let Some(k) = r.first_positive {
            nbp_sum += k;
            with_positive += 1;
        }
        prompt_sum += r.total_prompt_tokens;
        output_sum += r.total_output_tokens;
        for s in &r.steps {
            if let Some(kind) = s.kind() {
                steps += 1;
                malformed += usize::from(kind == PredictionKind::Malformed);
            }
        }
        failed += usize::from(r.failed());
    }
    let (neg_total, neg_rejected) = negative_counts(records);
    Ok(Metrics {
        n,
        em: mean(em as f64, n),
        answered_rate: mean(answered as f64, n),
        neg_rejection_acc: mean(neg_rejected as f64, neg_total),
        negative_steps: neg_total,
        mean_neg_before_positive: mean(nbp_sum as f64, with_positive),
        without_positive: n - with_positive,
        mean_prompt_tokens: mean(prompt_sum as f64, n),
        mean_output_tokens: mean(output_sum as f64, n),
        malformed_rate: mean(malformed as f64, steps),
        failed,
        empty: n == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    WindowSize,
    Order,
    Shots,
    FixedSize,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::WindowSize => "window_size",
            Axis::Order => "order",
            Axis::Shots => "shots",
            Axis::FixedSize => "fixed_size",
        }
    }

    /// Applies one axis value to a copy of `base`.
    pub fn apply(&self, base: &RunConfig, value: &str) -> Result<RunConfig, String> {
        let mut cfg = base.clone();
        let size = || {
            value
                .trim()
                .parse::<usize>()
                .map_err(|_| format!("{value:?} is not a non-negative integer"))
        };
        match self {
            Axis::WindowSize => cfg.window.window_size = size()?,
            Axis::Order => cfg.window.order = value.parse::<WindowOrder>()?,
            Axis::Shots => {
                let n = size()?;
                if !matches!(n, 0 | 2 | 4 | 6 | 8) {
                    return Err(format!("shot count {n} not in {{0,2,4,6,8}}"));
                }
                cfg.shots = n;
            }
            Axis::FixedSize => {
                cfg.mode = RunMode::Fixed;
                cfg.fixed_size = size()?;
            }
        }
        Ok(cfg)
    }
}

impl std::str::FromStr for Axis {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "window-size" => Ok(Axis::WindowSize),
            "order" => Ok(Axis::Order),
            "shots" => Ok(Axis::Shots),
            "fixed-size" => Ok(Axis::FixedSize),
            _ => Err(EvalError::UnknownAxis(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub outcome: Result<Metrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    /// Column label; the axis name, or `run` for a single run.
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn single(metrics: Metrics) -> Self {
        Self {
            axis: "run".into(),
            rows: vec![AblationRow {
                value: "all".into(),
                outcome: Ok(metrics),
            }],
        }
    }

    pub fn metrics(&self, value: &str) -> Option<&Metrics> {
        self.rows
            .iter()
            .find(|r| r.value == value)
            .and_then(|r| r.outcome.as_ref().ok())
    }
}

/// Runs the dataset once per axis value, changing only that axis. A failing
/// value yields an error row and the remaining values still run.
pub fn ablate(
    axis: Axis,
    values: &[String],
    base: &RunConfig,
    dataset: &[QAExample],
    pipeline: &Pipeline<'_>,
) -> Result<AblationTable, EvalError> {
    if values.is_empty() {
        return Err(EvalError::NoValues);
    }
    let mut rows: Vec<AblationRow> = Vec::with_capacity(values.len());
    for value in values {
        let value = value.trim().to_owned();
        if rows.iter().any(|r| r.value == value) {
            continue;
        }
        let outcome = axis
            .apply(base, &value)
            .and_then(|cfg| run_dataset(dataset, pipeline, &cfg).map_err(|e| e.to_string()))
            .and_then(|records| aggregate(&records, dataset).map_err(|e| e.to_string()));
        rows.push(AblationRow { value, outcome });
    }
    Ok(AblationTable {
        axis: axis.name().into(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    TextTable,
    Csv,
}

const COLUMNS: [&str; 12] = [
    "n",
    "em",
    "answered_rate",
    "neg_rejection_acc",
    "negative_steps",
    "mean_neg_before_positive",
    "without_positive",
    "mean_prompt_wp_tokens",
    "mean_output_wp_tokens",
    "malformed_rate",
    "failed",
    "error",
];

fn cells(m: &Metrics) -> [String; 11] {
    let f = |x: f64| format!("{x:.4}");
    [
        m.n.to_string(),
        f(m.em),
        f(m.answered_rate),
        f(m.neg_rejection_acc),
        m.negative_steps.to_string(),
        f(m.mean_neg_before_positive),
        m.without_positive.to_string(),
        f(m.mean_prompt_tokens),
        f(m.mean_output_tokens),
        f(m.malformed_rate),
        m.failed.to_string(),
    ]
}

fn row_cells(row: &AblationRow) -> Vec<String> {
    let mut out = vec![row.value.clone()];
    match &row.outcome {
        Ok(m) => {
            out.extend(cells(m));
            out.push(String::new());
        }
        Err(e) => {
            out.extend(std::iter::repeat_n(String::new(), 11));
            out.push(e.clone());
        }
    }
    out
}

pub fn render_csv(table: &AblationTable) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![table.axis.as_str()];
    header.extend(COLUMNS);
    w.write_record(&header).expect("in-memory write");
    for row in &table.rows {
        w.write_record(row_cells(row)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

pub fn render_text(table: &AblationTable) -> String {
    let mut header: Vec<String> = vec![table.axis.clone()];
    header.extend(COLUMNS.iter().map(|c| c.to_string()));
    let rows: Vec<Vec<String>> = table.rows.iter().map(row_cells).collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].len())
                .chain(std::iter::once(header[i].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header);
    line(&mut out, &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for r in &rows {
        line(&mut out, r);
    }
    out.push_str("token columns count wordpiece tokens\n");
    out
}

pub fn report(table: &AblationTable, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    let body = match format {
        ReportFormat::Csv => render_csv(table),
        ReportFormat::TextTable => render_text(table),
    };
    std::fs::write(path, body).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Mean iterative prompt tokens over mean fixed prompt tokens.
pub fn token_ratio(iterative: &Metrics, fixed: &Metrics) -> f64 {
    if fixed.mean_prompt_tokens == 0.0 {
        return f64::NAN;
    }
    iterative.mean_prompt_tokens / fixed.mean_prompt_tokens
}
