//! Synthetic corpora with known ranking and known relevant ranks.
//!
//! Every page contains the shared query term `topic`; page `r` holds it
//! `pages - r` times and all pages are padded to the same token length, so
//! BM25 ranks page `r` at position `r` for every question. Example `i` asks
//! about `topic` plus a private marker that occurs in no page, and its answer
//! `ans{i:05}` is written into the pages at its chosen ranks. Recall at any
//! cutoff is therefore known without running retrieval.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_corpus, write_dataset, Corpus, CorpusError, Page, QAExample};
use crate::wordpiece::{basic_tokenize, write_vocab, Vocab, VocabError, UNK_TOKEN};

const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", UNK_TOKEN, "[CLS]", "[SEP]", "[MASK]"];
const QUERY_TERM: &str = "topic";
const FILLER: &str = "pad";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureSpec {
    pub pages: usize,
    /// Per example, the ranks whose pages hold its answer. Empty means the
    /// example has no relevant page.
    pub relevant_ranks: Vec<Vec<usize>>,
    /// Also list relevant pages in `gold_page_ids`.
    pub gold_ids: bool,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub corpus: Corpus,
    pub dataset: Vec<QAExample>,
    pub vocab: Vocab,
    pub relevant_ranks: Vec<Vec<usize>>,
}

pub fn page_id(rank: usize) -> String {
    format!("p{rank:05}")
}

pub fn answer_for(example: usize) -> String {
    format!("ans{example:05}")
}

/// Builds the fixture. With `base`, the vocabulary is `base` plus any fixture
/// word it lacks; otherwise it holds only the special tokens and fixture
/// words.
///
/// # Panics
/// If a rank is out of range or `pages` is zero.
pub fn build_fixture(spec: &FixtureSpec, base: Option<&Vocab>) -> Fixture {
    assert!(spec.pages > 0, "fixture needs at least one page");
    let mut answers_at: Vec<Vec<usize>> = vec![Vec::new(); spec.pages];
    for (i, ranks) in spec.relevant_ranks.iter().enumerate() {
        for &r in ranks {
            assert!(r < spec.pages, "rank {r} outside {} pages", spec.pages);
            if !answers_at[r].contains(&i) {
                answers_at[r].push(i);
            }
        }
    }

    let bodies: Vec<(String, String)> = (0..spec.pages)
        .map(|r| {
            let mut content = vec![QUERY_TERM; spec.pages - r].join(" ");
            content.push('.');
            for &i in &answers_at[r] {
                content.push_str(&format!(" Entry {}.", answer_for(i)));
            }
            (format!("Page {}", page_id(r)), content)
        })
        .collect();
    let lengths: Vec<usize> = bodies
        .iter()
        .map(|(t, c)| basic_tokenize(&format!("{t} {c}")).len())
        .collect();
    let target = lengths.iter().copied().max().unwrap_or(0);
    let pages: Vec<Page> = bodies
        .into_iter()
        .zip(&lengths)
        .enumerate()
        .map(|(r, ((title, mut content), &len))| {
            for _ in len..target {
                content.push(' ');
                content.push_str(FILLER);
            }
            Page::new(page_id(r), title, content)
        })
        .collect();

    let dataset: Vec<QAExample> = spec
        .relevant_ranks
        .iter()
        .enumerate()
        .map(|(i, ranks)| QAExample {
            id: format!("q{i:05}"),
            question: format!("Where is {QUERY_TERM} q{i:05}?"),
            answers: vec![answer_for(i)],
            gold_page_ids: if spec.gold_ids {
                ranks.iter().map(|&r| page_id(r)).collect()
            } else {
                Vec::new()
            },
        })
        .collect();

    let vocab = vocab_for(
        pages
            .iter()
            .map(Page::full_text)
            .chain(dataset.iter().map(|e| e.question.clone())),
        base,
    );
    Fixture {
        corpus: Corpus::from_pages(pages).expect("fixture page ids are unique"),
        dataset,
        vocab,
        relevant_ranks: spec.relevant_ranks.clone(),
    }
}

/// Vocabulary covering every pre-token of `texts` as a whole word.
pub fn vocab_for(texts: impl IntoIterator<Item = String>, base: Option<&Vocab>) -> Vocab {
    let mut tokens: Vec<String> = match base {
        Some(v) => v.tokens().to_vec(),
        None => SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
    };
    let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    for text in texts {
        for word in basic_tokenize(&text) {
            if seen.insert(word.clone()) {
                tokens.push(word);
            }
        }
    }
    Vocab::from_tokens(tokens).expect("fixture vocab is duplicate-free and has [UNK]")
}

impl Fixture {
    /// Fraction of examples with a relevant page among the first `k` ranks.
    pub fn expected_recall(&self, k: usize) -> f64 {
        expected_recall(&self.relevant_ranks, k)
    }

    /// Writes `corpus.jsonl`, `dataset.jsonl` and `vocab.txt` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<(), FixtureWriteError> {
        let dir = dir.as_ref();
        write_corpus(&self.corpus, dir.join("corpus.jsonl"))?;
        write_dataset(&self.dataset, dir.join("dataset.jsonl"))?;
        write_vocab(&self.vocab, dir.join("vocab.txt"))?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureWriteError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub fn expected_recall(relevant_ranks: &[Vec<usize>], k: usize) -> f64 {
    if relevant_ranks.is_empty() {
        return 0.0;
    }
    let hits = relevant_ranks
        .iter()
        .filter(|ranks| ranks.iter().any(|&r| r < k))
        .count();
    hits as f64 / relevant_ranks.len() as f64
}

/// Random placements: each example gets up to `max_relevant` distinct ranks
/// in `0..pages`, or none with probability `miss_rate`.
pub fn random_ranks(examples: usize, pages: usize, max_relevant: usize, miss_rate: f64, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..pages).collect();
    (0..examples)
        .map(|_| {
            if max_relevant == 0 || rng.gen_bool(miss_rate) {
                return Vec::new();
            }
            let n = rng.gen_range(1..=max_relevant.min(pages));
            let mut picked: Vec<usize> = all.choose_multiple(&mut rng, n).copied().collect();
            picked.sort_unstable();
            picked
        })
        .collect()
}

/// One relevant page per example at a uniform rank below `top`.
pub fn front_loaded_ranks(examples: usize, top: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..examples).map(|_| vec![rng.gen_range(0..top)]).collect()
}

/// Ranks for a fixture whose windows of size `w` hold relevant pages exactly
/// at the given window ordinals (forward order). Example `i` uses the page at
/// offset `i % w` inside each window, which spreads answers over the pages.
pub fn window_placements(patterns: &[Vec<usize>], w: usize) -> Vec<Vec<usize>> {
    patterns
        .iter()
        .enumerate()
        .map(|(i, wins)| wins.iter().map(|&k| k * w + i % w).collect())
        .collect()
}
