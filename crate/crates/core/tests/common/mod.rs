#![allow(dead_code)]

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use winrag::corpus::{Corpus, Page};
use winrag::wordpiece::{token_ids, Vocab};

pub const WORDS: [&str; 24] = [
    "river", "stone", "castle", "maple", "engine", "harbor", "violet", "glacier", "summit", "lantern", "copper",
    "meadow", "falcon", "orbit", "prism", "quartz", "saddle", "timber", "velvet", "willow", "ember", "fjord",
    "granite", "hollow",
];

/// Vocab over `WORDS` plus a few continuation pieces so some words split.
pub fn small_vocab() -> Vocab {
    let mut tokens: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend(WORDS.iter().map(|w| w.to_string()));
    tokens.extend(
        ["sto", "##ne", "##s", "##er", "cast", "##le", ".", ","]
            .iter()
            .map(|s| s.to_string()),
    );
    Vocab::from_tokens(tokens).unwrap()
}

pub fn random_text(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    let extra = ["stones", "caster", "zebra", ".", ","];
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.1) {
                *extra.choose(rng).unwrap()
            } else {
                *WORDS.choose(rng).unwrap()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn random_corpus(rng: &mut impl Rng, pages: usize) -> Corpus {
    Corpus::from_pages(
        (0..pages)
            .map(|i| Page::new(format!("d{i}"), random_text(rng, 0, 2), random_text(rng, 0, 40)))
            .collect(),
    )
    .unwrap()
}

/// Direct BM25 over re-tokenized pages, no index.
pub fn brute_force_rank(corpus: &Corpus, vocab: &Vocab, query: &str, k1: f64, b: f64, k: usize) -> Vec<(String, f64)> {
    let docs: Vec<Vec<u32>> = corpus
        .pages()
        .iter()
        .map(|p| token_ids(&p.full_text(), vocab))
        .collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let mut df: HashMap<u32, f64> = HashMap::new();
    for d in &docs {
        let mut seen: Vec<u32> = d.clone();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1.0;
        }
    }
    let q = token_ids(query, vocab);
    let mut scored: Vec<(usize, f64)> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let dl = d.len() as f64;
            let s: f64 = q
                .iter()
                .map(|t| {
                    let tf = d.iter().filter(|x| *x == t).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let dft = df[t];
                    let idf = (1.0 + (n - dft + 0.5) / (dft + 0.5)).ln();
                    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl))
                })
                .sum();
            (i, s)
        })
        .filter(|&(_, s)| s > 0.0)
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
        .into_iter()
        .map(|(i, s)| (corpus.page(i).id.clone(), s))
        .collect()
}
