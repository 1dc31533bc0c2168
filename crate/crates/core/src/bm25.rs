//! Whole-page BM25 index over WordPiece token ids.
//!
//! Scoring uses
//!
//! ```text
//! score(q, d) = Σ_{t ∈ q} idf(t) · tf(t,d)·(k1+1) / (tf(t,d) + k1·(1 − b + b·|d|/avgdl))
//! idf(t)      = ln(1 + (N − df(t) + 0.5) / (df(t) + 0.5))
//! ```
//!
//! where the sum runs over query token occurrences, so a term repeated in the
//! question counts once per repetition. The idf form is strictly positive,
//! which keeps every score non-negative.
//!
//! # On-disk layout
//!
//! An index directory holds four files:
//!
//! * `manifest.json`: format version, `n`, `avgdl`, `k1`, `b`, vocabulary size
//!   and fingerprint, and the SHA-256 of each data file.
//! * `postings.bin`: magic `WRPS`, then per non-empty term in ascending term id
//!   order: `term: u32`, `count: u32`, then `count` pairs of
//!   `(ordinal: u32, tf: u32)`. All integers little-endian.
//! * `doclen.bin`: magic `WRDL`, then one `u32` token count per page.
//! * `ids.jsonl`: one JSON string (the page id) per line, in ordinal order.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, QAExample};
use crate::windowing::is_relevant_page;
use crate::wordpiece::{token_ids, Vocab};

pub const INDEX_FORMAT_VERSION: &str = "winrag-bm25/1";

const MANIFEST_FILE: &str = "manifest.json";
const POSTINGS_FILE: &str = "postings.bin";
const DOCLEN_FILE: &str = "doclen.bin";
const IDS_FILE: &str = "ids.jsonl";
const POSTINGS_MAGIC: &[u8; 4] = b"WRPS";
const DOCLEN_MAGIC: &[u8; 4] = b"WRDL";

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("invalid BM25 parameters k1={k1}, b={b}")]
    InvalidParams { k1: f64, b: f64 },
    #[error("index io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("index format version mismatch: found {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },
    #[error("corrupt index file {file}: {reason}")]
    Corrupt { file: String, reason: String },
    #[error("index was built with vocab {index} but vocab {given} was supplied")]
    VocabMismatch { index: String, given: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.8 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), IndexError> {
        let ok = self.k1.is_finite() && self.k1 >= 0.0 && (0.0..=1.0).contains(&self.b);
        if ok {
            Ok(())
        } else {
            Err(IndexError::InvalidParams { k1: self.k1, b: self.b })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub top_k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { top_k: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub ordinal: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub page_id: String,
    pub score: f64,
}

/// Pages for one question, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub question_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn page_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.page_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    postings: Vec<Vec<Posting>>,
    doc_len: Vec<u32>,
    avgdl: f64,
    page_ids: Vec<String>,
    params: Bm25Params,
    vocab_fingerprint: String,
}

impl Index {
    pub fn build(corpus: &Corpus, vocab: &Vocab, params: Bm25Params) -> Result<Self, IndexError> {
        params.validate()?;
        if corpus.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        // per-page sorted (term, tf) runs; collect() keeps ordinal order
        let per_doc: Vec<(u32, Vec<(u32, u32)>)> = corpus
            .pages()
            .par_iter()
            .map(|page| {
                let mut ids = token_ids(&page.full_text(), vocab);
                let len = ids.len() as u32;
                ids.sort_unstable();
                let mut runs: Vec<(u32, u32)> = Vec::new();
                for id in ids {
                    match runs.last_mut() {
                        Some((t, tf)) if *t == id => *tf += 1,
                        _ => runs.push((id, 1)),
                    }
                }
                (len, runs)
            })
            .collect();

        let mut postings = vec![Vec::new(); vocab.len()];
        let mut doc_len = Vec::with_capacity(per_doc.len());
        let mut total: u64 = 0;
        for (ordinal, (len, runs)) in per_doc.into_iter().enumerate() {
            doc_len.push(len);
            total += u64::from(len);
            for (term, tf) in runs {
                postings[term as usize].push(Posting {
                    ordinal: ordinal as u32,
                    tf,
                });
            }
        }
        let avgdl = total as f64 / doc_len.len() as f64;
        Ok(Self {
            postings,
            doc_len,
            avgdl,
            page_ids: corpus.pages().iter().map(|p| p.id.clone()).collect(),
            params,
            vocab_fingerprint: vocab.fingerprint(),
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    pub fn vocab_size(&self) -> usize {
        self.postings.len()
    }

    pub fn doc_len(&self, ordinal: usize) -> u32 {
        self.doc_len[ordinal]
    }

    pub fn page_id(&self, ordinal: usize) -> &str {
        &self.page_ids[ordinal]
    }

    pub fn postings(&self, term: u32) -> &[Posting] {
        self.postings.get(term as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn df(&self, term: u32) -> usize {
        self.postings(term).len()
    }

    pub fn idf(&self, term: u32) -> f64 {
        idf(self.num_docs(), self.df(term))
    }

    pub fn ensure_vocab(&self, vocab: &Vocab) -> Result<(), IndexError> {
        let given = vocab.fingerprint();
        if given == self.vocab_fingerprint {
            Ok(())
        } else {
            Err(IndexError::VocabMismatch {
                index: self.vocab_fingerprint.clone(),
                given,
            })
        }
    }

    fn term_weight(&self, idf: f64, tf: u32, ordinal: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let dl = f64::from(self.doc_len[ordinal]);
        idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / self.avgdl))
    }

    /// BM25 score of one page for a tokenized query.
    pub fn score(&self, query: &[u32], ordinal: usize) -> f64 {
        let mut s = 0.0;
        for &t in query {
            let plist = self.postings(t);
            if let Ok(i) = plist.binary_search_by_key(&(ordinal as u32), |p| p.ordinal) {
                s += self.term_weight(self.idf(t), plist[i].tf, ordinal);
            }
        }
        s
    }

    /// Top-k pages with positive score, by descending score then ascending
    /// ordinal.
    pub fn search(&self, query: &[u32], k: usize) -> Vec<(usize, f64)> {
        let mut acc = vec![0.0f64; self.num_docs()];
        let mut touched: Vec<u32> = Vec::new();
        for &t in query {
            let plist = self.postings(t);
            if plist.is_empty() {
                continue;
            }
            let idf = self.idf(t);
            for p in plist {
                let slot = &mut acc[p.ordinal as usize];
                if *slot == 0.0 {
                    touched.push(p.ordinal);
                }
                *slot += self.term_weight(idf, p.tf, p.ordinal as usize);
            }
        }
        let mut hits: Vec<(usize, f64)> = touched
            .into_iter()
            .map(|o| (o as usize, acc[o as usize]))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if hits.len() > k && k > 0 {
            hits.select_nth_unstable_by(k - 1, cmp);
            hits.truncate(k);
        }
        hits.sort_unstable_by(cmp);
        hits.truncate(k);
        hits
    }

    pub fn retrieve(&self, question_id: &str, question: &str, vocab: &Vocab, cfg: &RetrievalConfig) -> RankedList {
        let query = token_ids(question, vocab);
        let entries = self
            .search(&query, cfg.top_k)
            .into_iter()
            .map(|(o, score)| RankedEntry {
                page_id: self.page_ids[o].clone(),
                score,
            })
            .collect();
        RankedList {
            question_id: question_id.to_owned(),
            entries,
        }
    }
}

pub fn idf(n: usize, df: usize) -> f64 {
    let (n, df) = (n as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

pub fn build_index(corpus: &Corpus, vocab: &Vocab, params: Bm25Params) -> Result<Index, IndexError> {
    Index::build(corpus, vocab, params)
}

pub fn retrieve(example: &QAExample, index: &Index, vocab: &Vocab, cfg: &RetrievalConfig) -> RankedList {
    index.retrieve(&example.id, &example.question, vocab, cfg)
}

/// 1 when a relevant page appears among the first `k` entries.
pub fn recall_at_k(ranked: &RankedList, example: &QAExample, k: usize, corpus: &Corpus) -> u8 {
    let hit = ranked
        .entries
        .iter()
        .take(k)
        .filter_map(|e| corpus.get(&e.page_id))
        .any(|p| is_relevant_page(p, example));
    u8::from(hit)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: String,
    n: usize,
    avgdl: f64,
    k1: f64,
    b: f64,
    vocab_size: usize,
    vocab_fingerprint: String,
    files: Vec<FileDigest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileDigest {
    name: String,
    sha256: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IndexError + '_ {
    move |source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(file: &str, reason: impl Into<String>) -> IndexError {
    IndexError::Corrupt {
        file: file.to_owned(),
        reason: reason.into(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_index(index: &Index, dir: impl AsRef<Path>) -> Result<(), IndexError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut postings = Vec::new();
    postings.extend_from_slice(POSTINGS_MAGIC);
    for (term, plist) in index.postings.iter().enumerate() {
        if plist.is_empty() {
            continue;
        }
        postings.extend_from_slice(&(term as u32).to_le_bytes());
        postings.extend_from_slice(&(plist.len() as u32).to_le_bytes());
        for p in plist {
            postings.extend_from_slice(&p.ordinal.to_le_bytes());
            postings.extend_from_slice(&p.tf.to_le_bytes());
        }
    }

    let mut doclen = Vec::with_capacity(4 + 4 * index.doc_len.len());
    doclen.extend_from_slice(DOCLEN_MAGIC);
    for l in &index.doc_len {
        doclen.extend_from_slice(&l.to_le_bytes());
    }

    let mut ids = String::new();
    for id in &index.page_ids {
        ids.push_str(&serde_json::to_string(id).expect("string serializes"));
        ids.push('\n');
    }

    let files = [
        (POSTINGS_FILE, postings),
        (DOCLEN_FILE, doclen),
        (IDS_FILE, ids.into_bytes()),
    ];
    let mut digests = Vec::new();
    for (name, bytes) in &files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        digests.push(FileDigest {
            name: (*name).to_owned(),
            sha256: sha256_hex(bytes),
        });
    }

    let manifest = Manifest {
        format_version: INDEX_FORMAT_VERSION.to_owned(),
        n: index.num_docs(),
        avgdl: index.avgdl,
        k1: index.params.k1,
        b: index.params.b,
        vocab_size: index.vocab_size(),
        vocab_fingerprint: index.vocab_fingerprint.clone(),
        files: digests,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))
}

struct LeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'static str,
}

impl<'a> LeReader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 4], file: &'static str) -> Result<Self, IndexError> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(corrupt(file, "bad magic"));
        }
        Ok(Self { bytes, pos: 4, file })
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| corrupt(self.file, "truncated"))?;
        self.pos += 4;
        Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
    }
}

/// Loads an index written by [`save_index`], verifying version and file
/// digests.
pub fn load_index(dir: impl AsRef<Path>) -> Result<Index, IndexError> {
    let dir = dir.as_ref();
    let read = |name: &str| -> Result<Vec<u8>, IndexError> {
        let path = dir.join(name);
        fs::read(&path).map_err(io_err(&path))
    };
    let manifest: Manifest =
        serde_json::from_slice(&read(MANIFEST_FILE)?).map_err(|e| corrupt(MANIFEST_FILE, e.to_string()))?;
    if manifest.format_version != INDEX_FORMAT_VERSION {
        return Err(IndexError::Version {
            found: manifest.format_version,
            expected: INDEX_FORMAT_VERSION.to_owned(),
        });
    }
    let load = |name: &'static str| -> Result<Vec<u8>, IndexError> {
        let bytes = read(name)?;
        let digest = manifest
            .files
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| corrupt(MANIFEST_FILE, format!("no digest for {name}")))?;
        if digest.sha256 != sha256_hex(&bytes) {
            return Err(corrupt(name, "checksum mismatch"));
        }
        Ok(bytes)
    };

    let n = manifest.n;
    if n == 0 {
        return Err(corrupt(MANIFEST_FILE, "n is zero"));
    }
    let raw = load(DOCLEN_FILE)?;
    let mut r = LeReader::new(&raw, DOCLEN_MAGIC, DOCLEN_FILE)?;
    let mut doc_len = Vec::with_capacity(n);
    while !r.done() {
        doc_len.push(r.u32()?);
    }
    if doc_len.len() != n {
        return Err(corrupt(DOCLEN_FILE, format!("{} lengths for n={n}", doc_len.len())));
    }

    let raw = load(POSTINGS_FILE)?;
    let mut r = LeReader::new(&raw, POSTINGS_MAGIC, POSTINGS_FILE)?;
    let mut postings = vec![Vec::new(); manifest.vocab_size];
    while !r.done() {
        let term = r.u32()? as usize;
        let count = r.u32()? as usize;
        let slot = postings
            .get_mut(term)
            .ok_or_else(|| corrupt(POSTINGS_FILE, format!("term {term} outside vocab")))?;
        slot.reserve(count);
        for _ in 0..count {
            let ordinal = r.u32()?;
            let tf = r.u32()?;
            if ordinal as usize >= n {
                return Err(corrupt(POSTINGS_FILE, format!("ordinal {ordinal} >= n")));
            }
            slot.push(Posting { ordinal, tf });
        }
    }

    let raw = load(IDS_FILE)?;
    let text = std::str::from_utf8(&raw).map_err(|e| corrupt(IDS_FILE, e.to_string()))?;
    let page_ids = text
        .lines()
        .map(serde_json::from_str::<String>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| corrupt(IDS_FILE, e.to_string()))?;
    if page_ids.len() != n {
        return Err(corrupt(IDS_FILE, format!("{} ids for n={n}", page_ids.len())));
    }

    let total: u64 = doc_len.iter().map(|&l| u64::from(l)).sum();
    let avgdl = total as f64 / n as f64;
    if (avgdl - manifest.avgdl).abs() > 1e-9 * avgdl.max(1.0) {
        return Err(corrupt(MANIFEST_FILE, "avgdl disagrees with doclen.bin"));
    }

    Ok(Index {
        postings,
        doc_len,
        avgdl,
        page_ids,
        params: Bm25Params {
            k1: manifest.k1,
            b: manifest.b,
        },
        vocab_fingerprint: manifest.vocab_fingerprint,
    })
}
