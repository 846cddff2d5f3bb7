//! Byte-level BPE with byte fallback: training, encoding, vocabulary merging
//! and a versioned vocabulary file format.
//!
//! Text is split into chunks of leading whitespace plus a run of
//! non-whitespace bytes, and merges never cross a chunk boundary. Every
//! vocabulary starts with the 256 single-byte pieces, so any byte string
//! encodes and decodes exactly.

mod train;
mod vocab;

pub use train::train_bpe;
pub use vocab::{SubwordVocab, VOCAB_HEADER};

use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed vocabulary: {0}")]
    Format(String),
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TokenizerError> = std::result::Result<T, E>;

pub const DEFAULT_MAX_PIECE_LEN: usize = 16;

/// Splits `bytes` so that each chunk is optional leading whitespace followed
/// by non-whitespace bytes.
pub fn pre_tokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        if bytes[i].is_ascii_whitespace() && !bytes[i - 1].is_ascii_whitespace() {
            out.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        out.push(&bytes[start..]);
    }
    out
}

/// Piece union in first-seen order and concatenated merge rules, both with
/// duplicates dropped. The merged piece cap is the largest constituent cap.
pub fn merge_subtokenizers(vocabs: &[SubwordVocab]) -> Result<SubwordVocab> {
    let Some(first) = vocabs.first() else {
        return Err(TokenizerError::Config("nothing to merge".into()));
    };
    let mut pieces: Vec<Vec<u8>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut merges = Vec::new();
    let mut seen_merges = std::collections::HashSet::new();
    let mut max_len = first.max_piece_len();
    for v in vocabs {
        max_len = max_len.max(v.max_piece_len());
        for p in v.pieces() {
            if seen.insert(p.clone()) {
                pieces.push(p.clone());
            }
        }
        for m in v.merges() {
            if seen_merges.insert(m.clone()) {
                merges.push(m.clone());
            }
        }
    }
    SubwordVocab::from_parts(pieces, merges, max_len)
}

/// Tokens per Unicode character for one language bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageRatio {
    pub language: String,
    pub tokens: usize,
    pub chars: usize,
    /// `None` when the bucket has no characters.
    pub ratio: Option<f64>,
}

/// Tokens / Unicode characters per language; lower is better.
pub fn compression_ratio(texts: &BTreeMap<String, Vec<String>>, vocab: &SubwordVocab) -> Vec<LanguageRatio> {
    texts
        .iter()
        .map(|(lang, docs)| {
            let tokens: usize = docs.iter().map(|d| vocab.encode(d).len()).sum();
            let chars: usize = docs.iter().map(|d| d.chars().count()).sum();
            LanguageRatio {
                language: lang.clone(),
                tokens,
                chars,
                ratio: (chars > 0).then(|| tokens as f64 / chars as f64),
            }
        })
        .collect()
}
