//! Prompt rendering.
//!
//! A template file is plain text split into sections by `@@ <name>` lines:
//!
//! | section    | placeholders                               |
//! |------------|--------------------------------------------|
//! | `system`   | `{abstain}`                                |
//! | `example`  | `{n}`, `{pages}`, `{question}`, `{output}` |
//! | `page`     | `{id}`, `{title}`, `{content}`             |
//! | `question` | `{question}`                               |
//!
//! `{{` and `}}` produce literal braces. A prompt is the system section,
//! then one rendered `example` per shot, then the window's pages, then the
//! question, separated by blank lines.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Page};
use crate::eval::normalize_answer;
use crate::parsing::ABSTAIN_MARKER;
use crate::windowing::Window;
use crate::wordpiece::{count_tokens, Vocab};

pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/default.txt");

const NEGATIVE_RATIONALE: &str = "None of the pages contains information that answers the question.";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template: {0}")]
    Template(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("exemplar pool line {line}: {message}")]
    Pool { line: usize, message: String },
    #[error("shot count must be even, got {0}")]
    OddShots(usize),
    #[error("exemplar pool has too few {kind} exemplars: need {needed}, have {available} (short by {})", needed - available)]
    InsufficientPool {
        kind: ExemplarKind,
        needed: usize,
        available: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

/// One parsed template section.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Pattern {
    segments: Vec<Segment>,
}

impl Pattern {
    fn parse(section: &str, src: &str, allowed: &[&str]) -> Result<Self, PromptError> {
        let mut segments = Vec::new();
        let mut text = String::new();
        let mut chars = src.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    text.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    text.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some('}') => break,
                            Some(ch) => name.push(ch),
                            None => {
                                return Err(PromptError::Template(format!(
                                    "unterminated placeholder in section {section:?}"
                                )))
                            }
                        }
                    }
                    if !allowed.contains(&name.as_str()) {
                        return Err(PromptError::Template(format!(
                            "unknown placeholder {{{name}}} in section {section:?} (allowed: {})",
                            allowed.join(", ")
                        )));
                    }
                    if !text.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut text)));
                    }
                    segments.push(Segment::Slot(name));
                }
                '}' => return Err(PromptError::Template(format!("stray '}}' in section {section:?}"))),
                _ => text.push(c),
            }
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text));
        }
        Ok(Self { segments })
    }

    fn slots(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(n) => Some(n.as_str()),
            Segment::Text(_) => None,
        })
    }

    fn require(&self, section: &str, names: &[&str]) -> Result<(), PromptError> {
        for n in names {
            if !self.slots().any(|s| s == *n) {
                return Err(PromptError::Template(format!(
                    "section {section:?} must contain {{{n}}}"
                )));
            }
        }
        Ok(())
    }

    fn render_into(&self, out: &mut String, mut value: impl FnMut(&str, &mut String)) {
        for s in &self.segments {
            match s {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(n) => value(n, out),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    system_instruction: String,
    example: Pattern,
    page: Pattern,
    question: Pattern,
}

impl PromptTemplate {
    pub fn parse(src: &str) -> Result<Self, PromptError> {
        let mut sections: HashMap<String, String> = HashMap::new();
        let mut current: Option<String> = None;
        for line in src.lines() {
            if let Some(name) = line.strip_prefix("@@ ") {
                let name = name.trim().to_owned();
                if sections.contains_key(&name) {
                    return Err(PromptError::Template(format!("duplicate section {name:?}")));
                }
                sections.insert(name.clone(), String::new());
                current = Some(name);
                continue;
            }
            match &current {
                Some(name) => {
                    let body = sections.get_mut(name).expect("section exists");
                    body.push_str(line);
                    body.push('\n');
                }
                None if line.trim().is_empty() => {}
                None => return Err(PromptError::Template("text before the first @@ section header".into())),
            }
        }
        let mut take = |name: &str| -> Result<String, PromptError> {
            sections
                .remove(name)
                .map(|s| s.trim_end_matches('\n').to_owned())
                .ok_or_else(|| PromptError::Template(format!("missing section {name:?}")))
        };

        let system = Pattern::parse("system", &take("system")?, &["abstain"])?;
        let example = Pattern::parse("example", &take("example")?, &["n", "pages", "question", "output"])?;
        let page = Pattern::parse("page", &take("page")?, &["id", "title", "content"])?;
        let question = Pattern::parse("question", &take("question")?, &["question"])?;
        if let Some(extra) = sections.keys().next() {
            return Err(PromptError::Template(format!("unknown section {extra:?}")));
        }

        example.require("example", &["pages", "question", "output"])?;
        question.require("question", &["question"])?;
        let order: Vec<&str> = page.slots().collect();
        if order != ["id", "title", "content"] {
            return Err(PromptError::Template(
                "section \"page\" must contain {id}, {title}, {content} once each, in that order".into(),
            ));
        }

        let mut system_instruction = String::new();
        system.render_into(&mut system_instruction, |_, out| out.push_str(ABSTAIN_MARKER));
        if !system_instruction.contains(ABSTAIN_MARKER) {
            return Err(PromptError::Template(format!(
                "system instruction must state the abstention phrase {ABSTAIN_MARKER:?}"
            )));
        }
        Ok(Self {
            system_instruction,
            example,
            page,
            question,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&src)
    }

    pub fn system_instruction(&self) -> &str {
        &self.system_instruction
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarKind {
    Positive,
    Negative,
}

impl std::fmt::Display for ExemplarKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExemplarKind::Positive => "positive",
            ExemplarKind::Negative => "negative",
        })
    }
}

/// Worked example shown before the real task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub question: String,
    pub pages: Vec<Page>,
    pub kind: ExemplarKind,
    pub reasoning: String,
    pub answer: String,
}

impl Exemplar {
    pub fn validate(&self) -> Result<(), String> {
        if self.pages.is_empty() {
            return Err("exemplar has no pages".into());
        }
        match self.kind {
            ExemplarKind::Negative if self.answer.trim().to_lowercase() != ABSTAIN_MARKER => Err(format!(
                "negative exemplar answer must be {ABSTAIN_MARKER:?}, got {:?}",
                self.answer
            )),
            ExemplarKind::Positive if self.answer.trim().is_empty() => Err("positive exemplar needs an answer".into()),
            ExemplarKind::Positive if self.reasoning.trim().is_empty() => {
                Err("positive exemplar needs a reasoning path".into())
            }
            _ => Ok(()),
        }
    }

    /// Target output in the canonical grammar.
    pub fn target_output(&self) -> String {
        match self.kind {
            ExemplarKind::Positive => {
                let needle = normalize_answer(&self.answer);
                let support = self
                    .pages
                    .iter()
                    .find(|p| !needle.is_empty() && normalize_answer(&p.full_text()).contains(&needle))
                    .unwrap_or(&self.pages[0]);
                format!(
                    "PAGE_ID: {}\nEVIDENCE: {}\nANSWER: {}",
                    support.id,
                    one_line(&self.reasoning),
                    one_line(&self.answer)
                )
            }
            ExemplarKind::Negative => {
                let why = if self.reasoning.trim().is_empty() {
                    NEGATIVE_RATIONALE.to_owned()
                } else {
                    one_line(&self.reasoning)
                };
                format!("RATIONALE: {why}\nANSWER: {ABSTAIN_MARKER}")
            }
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Deserialize)]
struct PoolRecord {
    question: String,
    page_ids: Vec<String>,
    kind: ExemplarKind,
    #[serde(default)]
    reasoning: String,
    answer: String,
}

/// Reads an exemplar pool, resolving page ids against `corpus`.
pub fn load_exemplars(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<Exemplar>, PromptError> {
    let path = path.as_ref();
    let io = |source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let pool_err = |message: String| PromptError::Pool { line: i + 1, message };
        let rec: PoolRecord = serde_json::from_str(&line).map_err(|e| pool_err(e.to_string()))?;
        let pages = rec
            .page_ids
            .iter()
            .map(|id| {
                corpus
                    .get(id)
                    .cloned()
                    .ok_or_else(|| pool_err(format!("page {id:?} is not in the corpus")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let ex = Exemplar {
            question: rec.question,
            pages,
            kind: rec.kind,
            reasoning: rec.reasoning,
            answer: rec.answer,
        };
        ex.validate().map_err(pool_err)?;
        out.push(ex);
    }
    Ok(out)
}

/// Picks `n/2` positive and `n/2` negative exemplars with a seeded shuffle
/// and interleaves them, positive first.
pub fn build_shots(pool: &[Exemplar], n: usize, seed: u64) -> Result<Vec<Exemplar>, PromptError> {
    if !n.is_multiple_of(2) {
        return Err(PromptError::OddShots(n));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |kind: ExemplarKind| -> Result<Vec<&Exemplar>, PromptError> {
        let mut of_kind: Vec<&Exemplar> = pool.iter().filter(|e| e.kind == kind).collect();
        if of_kind.len() < half {
            return Err(PromptError::InsufficientPool {
                kind,
                needed: half,
                available: of_kind.len(),
            });
        }
        of_kind.shuffle(&mut rng);
        of_kind.truncate(half);
        Ok(of_kind)
    };
    let pos = pick(ExemplarKind::Positive)?;
    let neg = pick(ExemplarKind::Negative)?;
    Ok(pos
        .into_iter()
        .zip(neg)
        .flat_map(|(p, q)| [p.clone(), q.clone()])
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    /// WordPiece tokens, not model-native tokens.
    pub token_count: usize,
    pub window_ordinal: usize,
    pub shot_count: usize,
}

fn render_page_into(out: &mut String, page: &Page, template: &PromptTemplate) {
    template.page.render_into(out, |slot, out| {
        out.push_str(match slot {
            "id" => &page.id,
            "title" => &page.title,
            _ => &page.content,
        })
    });
}

fn render_pages<'p>(pages: impl IntoIterator<Item = &'p Page>, template: &PromptTemplate) -> String {
    let mut out = String::new();
    for (i, page) in pages.into_iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        render_page_into(&mut out, page, template);
    }
    out
}

pub fn render_page(page: &Page, template: &PromptTemplate) -> String {
    let mut out = String::new();
    render_page_into(&mut out, page, template);
    out
}

fn render_shot(out: &mut String, n: usize, shot: &Exemplar, template: &PromptTemplate) {
    let pages = render_pages(&shot.pages, template);
    let output = shot.target_output();
    let n = n.to_string();
    template.example.render_into(out, |slot, out| {
        out.push_str(match slot {
            "n" => &n,
            "pages" => &pages,
            "question" => &shot.question,
            _ => &output,
        })
    });
}

/// Renders pages in the given order; window-free entry point used by the
/// fixed baseline and the negative-window probe.
pub fn build_prompt_for_pages(
    template: &PromptTemplate,
    shots: &[Exemplar],
    pages: &[&Page],
    question: &str,
    window_ordinal: usize,
    vocab: &Vocab,
) -> Prompt {
    let mut text = String::with_capacity(
        template.system_instruction.len() + pages.iter().map(|p| p.content.len() + 64).sum::<usize>(),
    );
    text.push_str(&template.system_instruction);
    for (i, shot) in shots.iter().enumerate() {
        text.push_str("\n\n");
        render_shot(&mut text, i + 1, shot, template);
    }
    for page in pages {
        text.push_str("\n\n");
        render_page_into(&mut text, page, template);
    }
    text.push_str("\n\n");
    template
        .question
        .render_into(&mut text, |_, out| out.push_str(question));
    let token_count = count_tokens(&text, vocab);
    Prompt {
        text,
        token_count,
        window_ordinal,
        shot_count: shots.len(),
    }
}

pub fn build_prompt(
    template: &PromptTemplate,
    shots: &[Exemplar],
    window: &Window<'_>,
    question: &str,
    vocab: &Vocab,
) -> Prompt {
    build_prompt_for_pages(template, shots, &window.pages, question, window.ordinal, vocab)
}
