//! Page collections and QA datasets.
//!
//! Both files are UTF-8, one JSON record per line. Blank lines are skipped so
//! a trailing newline never trips the loader.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate page id {id:?} (lines {first} and {second})")]
    DuplicateId { id: String, first: usize, second: usize },
}

/// One retrievable document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub id: String,
    pub title: String,
    #[serde(rename = "text")]
    pub content: String,
}

impl Page {
    pub fn new(id: impl Into<String>, title: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            content: content.into(),
        }
    }

    /// Title and body joined by a single space; this is what gets indexed and
    /// what answer matching runs against.
    pub fn full_text(&self) -> String {
        let mut s = String::with_capacity(self.title.len() + 1 + self.content.len());
        s.push_str(&self.title);
        s.push(' ');
        s.push_str(&self.content);
        s
    }
}

/// Immutable page collection with id lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pages: Vec<Page>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus, rejecting empty or duplicated ids.
    pub fn from_pages(pages: Vec<Page>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(pages.len());
        for (i, page) in pages.iter().enumerate() {
            if page.id.is_empty() {
                return Err(CorpusError::Malformed {
                    path: PathBuf::new(),
                    line: i + 1,
                    message: "empty page id".into(),
                });
            }
            if let Some(prev) = by_id.insert(page.id.clone(), i) {
                return Err(CorpusError::DuplicateId {
                    id: page.id.clone(),
                    first: prev + 1,
                    second: i + 1,
                });
            }
        }
        Ok(Self { pages, by_id })
    }

    pub fn pages(&self) -> &[Page] {
        &self.pages
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Page> {
        self.by_id.get(id).map(|&i| &self.pages[i])
    }

    pub fn ordinal_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn page(&self, ordinal: usize) -> &Page {
        &self.pages[ordinal]
    }
}

/// A question with its gold answer aliases and optional provenance pages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, rename = "gold_page_ids")]
    pub gold_page_ids: Vec<String>,
}

/// Dangling provenance reference found by [`validate_links`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DanglingLink {
    pub example_id: String,
    pub page_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub dangling: Vec<DanglingLink>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.dangling.is_empty()
    }

    pub fn dangling_ids(&self) -> Vec<&str> {
        self.dangling.iter().map(|d| d.page_id.as_str()).collect()
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path).map(BufReader::new).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads `path` line by line, handing each non-blank line and its 1-based
/// number to `f`.
fn for_each_record<F>(path: &Path, mut f: F) -> Result<(), CorpusError>
where
    F: FnMut(usize, &str) -> Result<(), CorpusError>,
{
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        f(i + 1, &line)?;
    }
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let mut pages = Vec::new();
    let mut lines = Vec::new();
    for_each_record(path, |line, text| {
        let page: Page = serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if page.id.is_empty() {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line,
                message: "empty page id".into(),
            });
        }
        pages.push(page);
        lines.push(line);
        Ok(())
    })?;
    Corpus::from_pages(pages).map_err(|e| match e {
        // report file line numbers rather than record positions
        CorpusError::DuplicateId { id, first, second } => CorpusError::DuplicateId {
            id,
            first: lines[first - 1],
            second: lines[second - 1],
        },
        other => other,
    })
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_records(corpus.pages(), path.as_ref())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QAExample>, CorpusError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for_each_record(path, |line, text| {
        let malformed = |message: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        };
        let ex: QAExample = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        if ex.answers.is_empty() {
            return Err(malformed(format!("example {:?} has no answers", ex.id)));
        }
        if ex.question.trim().is_empty() {
            return Err(malformed(format!("example {:?} has an empty question", ex.id)));
        }
        out.push(ex);
        Ok(())
    })?;
    Ok(out)
}

pub fn write_dataset(dataset: &[QAExample], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_records(dataset, path.as_ref())
}

fn write_records<T: Serialize>(records: &[T], path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn validate_links(corpus: &Corpus, dataset: &[QAExample]) -> ValidationReport {
    let dangling = dataset
        .iter()
        .flat_map(|ex| {
            ex.gold_page_ids
                .iter()
                .filter(|id| corpus.get(id).is_none())
                .map(|id| DanglingLink {
                    example_id: ex.id.clone(),
                    page_id: id.clone(),
                })
        })
        .collect();
    ValidationReport { dangling }
}
