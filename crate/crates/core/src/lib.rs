//! Sliding-window retrieval-augmented question answering.
//!
//! Pages are ranked with BM25 over WordPiece tokens, the ranked list is cut
//! into windows, and a language model reads one window at a time until it
//! produces a grounded answer or runs out of windows.

pub mod bm25;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod fixtures;
pub mod llm;
pub mod orchestrator;
pub mod parsing;
pub mod prompting;
pub mod windowing;
pub mod wordpiece;
