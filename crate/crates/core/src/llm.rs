//! Generation backends.
//!
//! Every backend receives the rendered prompt together with the window and
//! example it was built from. The remote backend only looks at the prompt;
//! the two mocks use the window and the gold data to act as a perfect reader
//! ([`OracleBackend`]) or as a reader that fabricates answers on negative
//! windows with a fixed probability ([`HallucinatorBackend`]).

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Page, QAExample};
use crate::eval::normalize_answer;
use crate::parsing::ABSTAIN_MARKER;
use crate::prompting::Prompt;
use crate::windowing::{is_relevant_with, normalized_aliases, Window};
use crate::wordpiece::{count_tokens, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl LlmError {
    /// True when the endpoint could not be reached at all.
    pub fn is_unreachable(&self) -> bool {
        matches!(self, LlmError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    /// Temperature-0 decoding; the only supported mode.
    #[default]
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenConfig {
    pub decoding: Decoding,
    pub max_output_tokens: usize,
    pub request_timeout: Duration,
    pub retries: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            decoding: Decoding::Greedy,
            max_output_tokens: 256,
            request_timeout: Duration::from_secs(60),
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    /// Set when the backend did not report token counts and WordPiece counts
    /// were substituted.
    pub tokens_estimated: bool,
    pub backend_name: String,
    pub latency: Duration,
}

pub struct GenerationRequest<'r, 'a> {
    pub prompt: &'r Prompt,
    pub window: &'r Window<'a>,
    pub example: &'r QAExample,
}

pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;

    fn generate(&self, req: &GenerationRequest<'_, '_>, cfg: &GenConfig) -> Result<Completion, LlmError>;
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_break = chars.peek().is_none_or(|&(_, n)| n.is_whitespace());
            if at_break {
                let end = i + c.len_utf8();
                out.push(text[start..end].trim());
                start = end;
            }
        }
    }
    out.push(text[start..].trim());
    out.retain(|s| !s.is_empty());
    out
}

/// Sentence of `page` that contains a gold alias, falling back to the
/// opening sentence or the title.
fn evidence_sentence(page: &Page, aliases: &[String]) -> String {
    let sents = sentences(&page.content);
    let hit = sents.iter().find(|s| {
        let norm = normalize_answer(s);
        aliases.iter().any(|a| norm.contains(a.as_str()))
    });
    match hit.or(sents.first()) {
        Some(s) => one_line(s),
        None => one_line(&page.title),
    }
}

fn abstention_text() -> String {
    format!("RATIONALE: none of the pages in this window answers the question.\nANSWER: {ABSTAIN_MARKER}")
}

/// Ideal reader: answers from the first relevant page of a positive window
/// and abstains on a negative one.
pub fn oracle_generate(window: &Window<'_>, example: &QAExample) -> String {
    let aliases = normalized_aliases(example);
    let Some(page) = window.pages.iter().find(|p| is_relevant_with(p, example, &aliases)) else {
        return abstention_text();
    };
    format!(
        "PAGE_ID: {}\nEVIDENCE: {}\nANSWER: {}",
        page.id,
        evidence_sentence(page, &aliases),
        one_line(&example.answers[0])
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HallucinatorConfig {
    pub false_answer_prob: f64,
    pub seed: u64,
}

impl Default for HallucinatorConfig {
    fn default() -> Self {
        Self {
            false_answer_prob: 0.543,
            seed: 0,
        }
    }
}

impl HallucinatorConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if (0.0..=1.0).contains(&self.false_answer_prob) {
            Ok(())
        } else {
            Err(LlmError::Config(format!(
                "false answer probability {} outside [0, 1]",
                self.false_answer_prob
            )))
        }
    }
}

fn window_rng(window: &Window<'_>, example: &QAExample, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(example.question.as_bytes());
    h.update([0]);
    for p in &window.pages {
        h.update(p.id.as_bytes());
        h.update([0]);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// A short phrase lifted from a random page of the window. On a negative
/// window it can never match a gold alias, since any alias contained in the
/// page text would have made the page relevant.
fn fabricate(window: &Window<'_>, rng: &mut ChaCha8Rng) -> String {
    let page = window.pages[rng.gen_range(0..window.pages.len())];
    let norm = normalize_answer(&page.full_text());
    let words: Vec<&str> = norm.split(' ').filter(|w| !w.is_empty()).collect();
    if words.is_empty() {
        return page.id.clone();
    }
    let start = rng.gen_range(0..words.len());
    let len = rng.gen_range(1..=3).min(words.len() - start);
    words[start..start + len].join(" ")
}

/// Oracle on positive windows; on negative windows fabricates an answer with
/// probability `false_answer_prob`, else abstains.
pub fn hallucinate_generate(window: &Window<'_>, example: &QAExample, cfg: &HallucinatorConfig) -> String {
    if window.is_positive() || window.pages.is_empty() {
        return oracle_generate(window, example);
    }
    let mut rng = window_rng(window, example, cfg.seed);
    if !rng.gen_bool(cfg.false_answer_prob) {
        return abstention_text();
    }
    let answer = fabricate(window, &mut rng);
    let page = window.pages[rng.gen_range(0..window.pages.len())];
    let evidence = sentences(&page.content)
        .first()
        .map(|s| one_line(s))
        .unwrap_or_default();
    format!("PAGE_ID: {}\nEVIDENCE: {}\nANSWER: {}", page.id, evidence, answer)
}

fn mock_completion(name: &str, text: String, prompt: &Prompt, vocab: &Vocab, started: Instant) -> Completion {
    Completion {
        output_tokens: count_tokens(&text, vocab),
        prompt_tokens: prompt.token_count,
        tokens_estimated: false,
        backend_name: name.to_owned(),
        latency: started.elapsed(),
        text,
    }
}

pub struct OracleBackend {
    vocab: Arc<Vocab>,
}

impl OracleBackend {
    pub fn new(vocab: Arc<Vocab>) -> Self {
        Self { vocab }
    }
}

impl LlmBackend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn generate(&self, req: &GenerationRequest<'_, '_>, _cfg: &GenConfig) -> Result<Completion, LlmError> {
        let started = Instant::now();
        let text = oracle_generate(req.window, req.example);
        Ok(mock_completion(self.name(), text, req.prompt, &self.vocab, started))
    }
}

pub struct HallucinatorBackend {
    vocab: Arc<Vocab>,
    cfg: HallucinatorConfig,
}

impl HallucinatorBackend {
    pub fn new(vocab: Arc<Vocab>, cfg: HallucinatorConfig) -> Result<Self, LlmError> {
        cfg.validate()?;
        Ok(Self { vocab, cfg })
    }
}

impl LlmBackend for HallucinatorBackend {
    fn name(&self) -> &str {
        "hallucinator"
    }

    fn generate(&self, req: &GenerationRequest<'_, '_>, _cfg: &GenConfig) -> Result<Completion, LlmError> {
        let started = Instant::now();
        let text = hallucinate_generate(req.window, req.example, &self.cfg);
        Ok(mock_completion(self.name(), text, req.prompt, &self.vocab, started))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpSettings {
    pub endpoint: String,
    pub model: Option<String>,
    /// Sent as `Authorization: Bearer <token>`.
    pub token: Option<String>,
    pub backoff: Duration,
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt: &'a str,
    max_output_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct HttpResponse {
    text: String,
    prompt_token_count: Option<usize>,
    output_token_count: Option<usize>,
}

/// One JSON POST per generation.
pub struct HttpBackend {
    settings: HttpSettings,
    client: reqwest::blocking::Client,
    vocab: Arc<Vocab>,
}

impl HttpBackend {
    pub fn new(settings: HttpSettings, vocab: Arc<Vocab>) -> Result<Self, LlmError> {
        if settings.endpoint.trim().is_empty() {
            return Err(LlmError::Config("no endpoint configured".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self {
            settings,
            client,
            vocab,
        })
    }

    fn attempt(&self, body: &HttpRequest<'_>, timeout: Duration) -> Result<HttpResponse, AttemptError> {
        let mut req = self.client.post(&self.settings.endpoint).timeout(timeout).json(body);
        if let Some(token) = &self.settings.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| AttemptError::Retryable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| AttemptError::Retryable(e.to_string()))?;
        if !status.is_success() {
            let err = LlmError::Status {
                status: status.as_u16(),
                body: text.chars().take(200).collect(),
            };
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                AttemptError::RetryableStatus(err)
            } else {
                AttemptError::Fatal(err)
            });
        }
        serde_json::from_str(&text).map_err(|e| AttemptError::Fatal(LlmError::InvalidResponse(e.to_string())))
    }
}

enum AttemptError {
    Retryable(String),
    RetryableStatus(LlmError),
    Fatal(LlmError),
}

impl LlmBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn generate(&self, req: &GenerationRequest<'_, '_>, cfg: &GenConfig) -> Result<Completion, LlmError> {
        let started = Instant::now();
        let deadline = started + cfg.request_timeout * (cfg.retries + 1);
        let body = HttpRequest {
            prompt: &req.prompt.text,
            max_output_tokens: cfg.max_output_tokens,
            model: self.settings.model.as_deref(),
        };
        let mut attempts = 0;
        let mut last: Option<AttemptError> = None;
        while attempts <= cfg.retries {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            if attempts > 0 {
                std::thread::sleep(self.settings.backoff.min(deadline - now));
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                break;
            }
            attempts += 1;
            match self.attempt(&body, cfg.request_timeout.min(remaining)) {
                Ok(resp) => {
                    let estimated = resp.prompt_token_count.is_none() || resp.output_token_count.is_none();
                    return Ok(Completion {
                        prompt_tokens: resp.prompt_token_count.unwrap_or(req.prompt.token_count),
                        output_tokens: resp
                            .output_token_count
                            .unwrap_or_else(|| count_tokens(&resp.text, &self.vocab)),
                        tokens_estimated: estimated,
                        backend_name: self.name().to_owned(),
                        latency: started.elapsed(),
                        text: resp.text,
                    });
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(e) => last = Some(e),
            }
        }
        Err(match last {
            Some(AttemptError::RetryableStatus(e)) | Some(AttemptError::Fatal(e)) => e,
            Some(AttemptError::Retryable(message)) => LlmError::Transport { attempts, message },
            None => LlmError::Transport {
                attempts,
                message: "deadline elapsed before first attempt".into(),
            },
        })
    }
}
