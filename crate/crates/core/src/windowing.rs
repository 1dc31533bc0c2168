//! Slicing ranked pages into windows and labelling them.
//!
//! A page is relevant to an example when its id is a gold provenance id, or
//! when some normalized gold alias occurs inside the normalized page text.
//! A window is positive iff it holds at least one relevant page.

use serde::{Deserialize, Serialize};

use crate::bm25::RankedList;
use crate::corpus::{Corpus, Page, QAExample};
use crate::eval::normalize_answer;

#[derive(Debug, thiserror::Error)]
pub enum WindowError {
    #[error("ranked page {0:?} is not in the corpus")]
    UnknownPage(String),
    #[error("window size must be at least 1")]
    ZeroWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowOrder {
    /// Descending retrieval score.
    #[default]
    Forward,
    /// Ascending retrieval score.
    Backward,
}

impl std::fmt::Display for WindowOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WindowOrder::Forward => "forward",
            WindowOrder::Backward => "backward",
        })
    }
}

impl std::str::FromStr for WindowOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "forward" => Ok(Self::Forward),
            "backward" => Ok(Self::Backward),
            other => Err(format!("unknown window order {other:?} (expected forward or backward)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_size: usize,
    pub order: WindowOrder,
    pub max_windows: Option<usize>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_size: 60,
            order: WindowOrder::Forward,
            max_windows: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window<'a> {
    pub ordinal: usize,
    pub pages: Vec<&'a Page>,
    pub label: WindowLabel,
}

impl Window<'_> {
    pub fn is_positive(&self) -> bool {
        self.label == WindowLabel::Positive
    }

    pub fn page_ids(&self) -> Vec<String> {
        self.pages.iter().map(|p| p.id.clone()).collect()
    }
}

/// Normalized gold aliases, dropping those that normalize to nothing (an
/// empty needle would match every page).
pub(crate) fn normalized_aliases(example: &QAExample) -> Vec<String> {
    example
        .answers
        .iter()
        .map(|a| normalize_answer(a))
        .filter(|a| !a.is_empty())
        .collect()
}

pub(crate) fn is_relevant_with(page: &Page, example: &QAExample, aliases: &[String]) -> bool {
    if example.gold_page_ids.contains(&page.id) {
        return true;
    }
    if aliases.is_empty() {
        return false;
    }
    let text = normalize_answer(&page.full_text());
    aliases.iter().any(|a| text.contains(a.as_str()))
}

pub fn is_relevant_page(page: &Page, example: &QAExample) -> bool {
    is_relevant_with(page, example, &normalized_aliases(example))
}

pub(crate) fn label_for(pages: &[&Page], example: &QAExample, aliases: &[String]) -> WindowLabel {
    if pages.iter().any(|p| is_relevant_with(p, example, aliases)) {
        WindowLabel::Positive
    } else {
        WindowLabel::Negative
    }
}

/// Resolves ranked ids to pages, best first.
pub fn resolve_pages<'a>(ranked: &RankedList, corpus: &'a Corpus) -> Result<Vec<&'a Page>, WindowError> {
    ranked
        .page_ids()
        .map(|id| corpus.get(id).ok_or_else(|| WindowError::UnknownPage(id.to_owned())))
        .collect()
}

pub fn make_windows<'a>(
    ranked: &RankedList,
    corpus: &'a Corpus,
    example: &QAExample,
    cfg: &WindowConfig,
) -> Result<Vec<Window<'a>>, WindowError> {
    if cfg.window_size == 0 {
        return Err(WindowError::ZeroWindow);
    }
    let mut pages = resolve_pages(ranked, corpus)?;
    if cfg.order == WindowOrder::Backward {
        pages.reverse();
    }
    let aliases = normalized_aliases(example);
    let limit = cfg.max_windows.unwrap_or(usize::MAX);
    Ok(pages
        .chunks(cfg.window_size)
        .take(limit)
        .enumerate()
        .map(|(ordinal, chunk)| Window {
            ordinal,
            label: label_for(chunk, example, &aliases),
            pages: chunk.to_vec(),
        })
        .collect())
}

pub fn first_positive_ordinal(windows: &[Window<'_>]) -> Option<usize> {
    windows.iter().find(|w| w.is_positive()).map(|w| w.ordinal)
}

/// Negative windows seen before the first positive one; `None` when no
/// window is positive.
pub fn negatives_before_first_positive(windows: &[Window<'_>]) -> Option<usize> {
    windows.iter().position(Window::is_positive)
}

/// First forward-order chunk of `w` consecutive ranked pages with no
/// relevant page: the highest-scored distractors available.
pub fn construct_negative_window<'a>(
    ranked: &RankedList,
    corpus: &'a Corpus,
    example: &QAExample,
    w: usize,
) -> Result<Option<Window<'a>>, WindowError> {
    let cfg = WindowConfig {
        window_size: w,
        order: WindowOrder::Forward,
        max_windows: None,
    };
    Ok(make_windows(ranked, corpus, example, &cfg)?
        .into_iter()
        .find(|win| !win.is_positive())
        .map(|mut win| {
            win.ordinal = 0;
            win
        }))
}
