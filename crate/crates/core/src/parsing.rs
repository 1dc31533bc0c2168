//! Completion parsing.
//!
//! Expected forms:
//!
//! ```text
//! PAGE_ID: <id>
//! EVIDENCE: <verbatim sentence(s)>
//! ANSWER: <short answer>
//! ```
//!
//! or an abstention, `ANSWER: answer not found`, optionally with a
//! `RATIONALE: <text>` line. Keys are case-insensitive and may carry markdown
//! decoration; code fences are ignored. Anything without a usable `ANSWER`
//! is malformed.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// The abstention phrase. Prompt templates must instruct exactly this text.
pub const ABSTAIN_MARKER: &str = "answer not found";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PredictionKind {
    Found,
    NotFound,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Prediction {
    pub kind: PredictionKind,
    pub page_id: Option<String>,
    pub evidence: Option<String>,
    pub answer: Option<String>,
    pub rationale: Option<String>,
    pub raw: String,
}

impl Prediction {
    fn malformed(raw: &str) -> Self {
        Self {
            kind: PredictionKind::Malformed,
            page_id: None,
            evidence: None,
            answer: None,
            rationale: None,
            raw: raw.to_owned(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Key {
    PageId,
    Evidence,
    Answer,
    Rationale,
}

fn key_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^[\s>*_#-]*(page[ _]?id|evidence|answer|rationale)[\s*_]*:[\s*_]*(.*?)[\s*_]*$")
            .expect("valid regex")
    })
}

fn classify(key: &str) -> Key {
    let k = key.to_ascii_lowercase();
    if k.starts_with("page") {
        Key::PageId
    } else if k == "evidence" {
        Key::Evidence
    } else if k == "answer" {
        Key::Answer
    } else {
        Key::Rationale
    }
}

fn matches_marker(s: &str) -> bool {
    s.trim().to_lowercase() == ABSTAIN_MARKER
}

#[derive(Default)]
struct Fields {
    page_id: Option<String>,
    evidence: Option<String>,
    answer: Option<String>,
    rationale: Option<String>,
}

fn extract(text: &str) -> Fields {
    let mut f = Fields::default();
    let mut last: Option<Key> = None;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            continue;
        }
        if let Some(c) = key_line().captures(line) {
            let key = classify(&c[1]);
            let value = c[2].trim().to_owned();
            let slot = match key {
                Key::PageId => &mut f.page_id,
                Key::Evidence => &mut f.evidence,
                Key::Answer => &mut f.answer,
                Key::Rationale => &mut f.rationale,
            };
            // first occurrence wins
            if slot.is_none() {
                *slot = Some(value);
                last = Some(key);
            } else {
                last = None;
            }
            continue;
        }
        let extra = line.trim();
        if extra.is_empty() {
            continue;
        }
        // free-form continuation lines extend evidence or rationale only
        let slot = match last {
            Some(Key::Evidence) => &mut f.evidence,
            Some(Key::Rationale) => &mut f.rationale,
            _ => continue,
        };
        if let Some(v) = slot {
            if !v.is_empty() {
                v.push(' ');
            }
            v.push_str(extra);
        }
    }
    f
}

fn non_empty(v: Option<String>) -> Option<String> {
    v.filter(|s| !s.is_empty())
}

/// Never fails; unusable text comes back as [`PredictionKind::Malformed`].
pub fn parse_completion(text: &str) -> Prediction {
    let f = extract(text);
    let Some(answer) = f.answer else {
        if matches_marker(text) {
            return Prediction {
                kind: PredictionKind::NotFound,
                page_id: None,
                evidence: None,
                answer: None,
                rationale: None,
                raw: text.to_owned(),
            };
        }
        return Prediction::malformed(text);
    };
    if matches_marker(&answer) {
        return Prediction {
            kind: PredictionKind::NotFound,
            page_id: None,
            evidence: None,
            answer: None,
            rationale: non_empty(f.rationale),
            raw: text.to_owned(),
        };
    }
    if answer.is_empty() {
        return Prediction::malformed(text);
    }
    Prediction {
        kind: PredictionKind::Found,
        page_id: non_empty(f.page_id),
        evidence: non_empty(f.evidence),
        answer: Some(answer),
        rationale: non_empty(f.rationale),
        raw: text.to_owned(),
    }
}

/// True iff the ANSWER field, or the whole trimmed text when there is none,
/// equals the abstention phrase ignoring case.
pub fn is_abstention(text: &str) -> bool {
    match extract(text).answer {
        Some(a) => matches_marker(&a),
        None => matches_marker(text),
    }
}
