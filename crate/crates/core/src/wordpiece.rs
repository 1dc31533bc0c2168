//! Uncased WordPiece tokenization.
//!
//! Pre-tokenization follows the uncased BERT rules: drop control characters,
//! lowercase, strip accents (NFD then drop combining marks), split on
//! whitespace and isolate every punctuation character. Each resulting word is
//! then split greedily into the longest vocabulary pieces, with non-initial
//! pieces looked up under the `##` prefix.
//!
//! CJK ideographs get no special treatment.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

pub const UNK_TOKEN: &str = "[UNK]";
pub const CONTINUATION_PREFIX: &str = "##";
/// Words longer than this many characters become a single `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("cannot read vocab {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate vocab token {token:?} at line {line}")]
    Duplicate { token: String, line: usize },
    #[error("vocab has no {UNK_TOKEN} entry")]
    MissingUnk,
}

/// Token list where the id of a token is its position.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    unk_id: u32,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(VocabError::Duplicate {
                    token: tok.clone(),
                    line: i + 1,
                });
            }
        }
        let unk_id = *index.get(UNK_TOKEN).ok_or(VocabError::MissingUnk)?;
        Ok(Self { tokens, index, unk_id })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    /// Hex SHA-256 over the newline-joined token list. Stored in index
    /// manifests so an index is never queried with a different vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab, VocabError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Vocab::from_tokens(text.lines().map(str::to_owned).collect())
}

/// Writes one token per line, in id order.
pub fn write_vocab(vocab: &Vocab, path: impl AsRef<Path>) -> Result<(), VocabError> {
    let path = path.as_ref();
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|source| VocabError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Token ids and their surface strings, index-aligned.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub surface: Vec<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn is_whitespace(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\n' | '\r') || get_general_category(c) == GeneralCategory::SpaceSeparator
}

fn is_control(c: char) -> bool {
    if matches!(c, '\t' | '\n' | '\r') {
        return false;
    }
    matches!(
        get_general_category(c),
        GeneralCategory::Control | GeneralCategory::Format
    )
}

fn is_punctuation(c: char) -> bool {
    if c.is_ascii_punctuation() {
        return true;
    }
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Splits `text` into lowercase, accent-free words with punctuation isolated.
pub fn basic_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, words: &mut Vec<String>| {
        if !current.is_empty() {
            words.push(std::mem::take(current));
        }
    };
    for raw in text.chars() {
        if raw == '\0' || raw == '\u{FFFD}' || is_control(raw) {
            continue;
        }
        if is_whitespace(raw) {
            flush(&mut current, &mut words);
            continue;
        }
        for lower in raw.to_lowercase() {
            for c in std::iter::once(lower).nfd() {
                if get_general_category(c) == GeneralCategory::NonspacingMark {
                    continue;
                }
                if is_punctuation(c) {
                    flush(&mut current, &mut words);
                    words.push(c.to_string());
                } else if is_whitespace(c) {
                    flush(&mut current, &mut words);
                } else if !is_control(c) {
                    current.push(c);
                }
            }
        }
    }
    flush(&mut current, &mut words);
    words
}

/// Greedy longest-match-first split of one pre-tokenized word, calling `emit`
/// with each piece's id and surface form.
fn split_word(word: &str, vocab: &Vocab, buf: &mut String, mut emit: impl FnMut(u32, &str)) {
    let char_count = word.chars().count();
    if char_count > MAX_WORD_CHARS {
        emit(vocab.unk_id, UNK_TOKEN);
        return;
    }
    // byte offsets of every char boundary, including the end
    let bounds: Vec<usize> = word
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(word.len()))
        .collect();

    let mut pieces: Vec<(u32, std::ops::Range<usize>)> = Vec::new();
    let mut start = 0;
    while start < bounds.len() - 1 {
        let mut found = None;
        for end in (start + 1..bounds.len()).rev() {
            let sub = &word[bounds[start]..bounds[end]];
            let id = if start > 0 {
                buf.clear();
                buf.push_str(CONTINUATION_PREFIX);
                buf.push_str(sub);
                vocab.id(buf)
            } else {
                vocab.id(sub)
            };
            if let Some(id) = id {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                pieces.push((id, bounds[start]..bounds[end]));
                start = end;
            }
            None => {
                emit(vocab.unk_id, UNK_TOKEN);
                return;
            }
        }
    }
    for (id, _) in pieces {
        emit(id, &vocab.tokens[id as usize]);
    }
}

/// WordPiece pieces for a single word (no whitespace).
pub fn wordpiece_word(word: &str, vocab: &Vocab) -> Vec<String> {
    let mut out = Vec::new();
    let mut buf = String::new();
    split_word(word, vocab, &mut buf, |_, s| out.push(s.to_owned()));
    out
}

fn for_each_piece(text: &str, vocab: &Vocab, mut emit: impl FnMut(u32, &str)) {
    let mut buf = String::new();
    for word in basic_tokenize(text) {
        split_word(&word, vocab, &mut buf, &mut emit);
    }
}

pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSeq {
    let mut seq = TokenSeq::default();
    for_each_piece(text, vocab, |id, s| {
        seq.ids.push(id);
        seq.surface.push(s.to_owned());
    });
    seq
}

/// Token ids only; the indexing hot path.
pub fn token_ids(text: &str, vocab: &Vocab) -> Vec<u32> {
    let mut ids = Vec::new();
    for_each_piece(text, vocab, |id, _| ids.push(id));
    ids
}

pub fn count_tokens(text: &str, vocab: &Vocab) -> usize {
    let mut n = 0;
    for_each_piece(text, vocab, |_, _| n += 1);
    n
}
