//! Deterministic byte-level text tokenizer with reserved special tokens.
//!
//! Stands in for a real LLM tokenizer wherever token counts or token ids are
//! needed. Ten special marker strings occupy ids 0..=9; every byte value maps
//! to id `byte + 10`, so the vocabulary has exactly 266 entries and token
//! counts are reproducible everywhere.

use thiserror::Error;

/// Special marker strings, in id order (ids 0..=9).
pub const SPECIAL_TOKENS: [&str; 10] = [
    "<s>",
    "</s>",
    "[INST]",
    "[/INST]",
    "<Img>",
    "<Sub>",
    "<pad>",
    "<unk>",
    "<reserved0>",
    "<reserved1>",
];

/// Id offset of byte tokens: byte value `b` has id `b + BYTE_OFFSET`.
pub const BYTE_OFFSET: u32 = 10;

/// Total vocabulary size: 10 specials + 256 byte tokens.
pub const VOCAB_SIZE: u32 = BYTE_OFFSET + 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenError {
    #[error("token id {0} is outside the vocabulary (size {VOCAB_SIZE})")]
    InvalidId(u32),
    #[error("detokenized bytes are not valid UTF-8 at byte {0}")]
    InvalidUtf8(usize),
}

/// The fixed toy vocabulary.
///
/// Construction is free of state; the struct exists so callers hold an
/// explicit handle to the tokenization scheme rather than calling free
/// functions scattered through the crate.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    // Special ids sorted by string length, longest first, for greedy matching.
    by_length: Vec<(u32, &'static str)>,
}

impl Vocab {
    pub fn new() -> Self {
        let mut by_length: Vec<(u32, &'static str)> = SPECIAL_TOKENS
            .iter()
            .enumerate()
            .map(|(id, s)| (id as u32, *s))
            .collect();
        // Stable sort keeps id order among equal lengths.
        by_length.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
        Vocab { by_length }
    }

    pub fn size(&self) -> u32 {
        VOCAB_SIZE
    }

    /// Id of a special token string, if it is one.
    pub fn special_id(&self, s: &str) -> Option<u32> {
        SPECIAL_TOKENS.iter().position(|t| *t == s).map(|i| i as u32)
    }

    /// Tokenize text: special strings are matched greedily longest-first and
    /// emitted as their reserved ids; everything else becomes one token per
    /// byte.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut ids = Vec::with_capacity(bytes.len());
        let mut i = 0;
        'outer: while i < bytes.len() {
            for &(id, special) in &self.by_length {
                let s = special.as_bytes();
                if bytes[i..].starts_with(s) {
                    ids.push(id);
                    i += s.len();
                    continue 'outer;
                }
            }
            ids.push(u32::from(bytes[i]) + BYTE_OFFSET);
            i += 1;
        }
        ids
    }

    /// Exact inverse of [`tokenize`](Self::tokenize): special ids expand to
    /// their strings, byte ids to their bytes.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String, TokenError> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < BYTE_OFFSET {
                bytes.extend_from_slice(SPECIAL_TOKENS[id as usize].as_bytes());
            } else if id < VOCAB_SIZE {
                bytes.push((id - BYTE_OFFSET) as u8);
            } else {
                return Err(TokenError::InvalidId(id));
            }
        }
        String::from_utf8(bytes).map_err(|e| TokenError::InvalidUtf8(e.utf8_error().valid_up_to()))
    }

    /// Number of tokens `text` occupies; equals `tokenize(text).len()`.
    pub fn count_tokens(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }

    /// Longest token prefix of `text` that fits in `max_tokens`, detokenized.
    ///
    /// A byte-token cut can land inside a multi-byte character; trailing
    /// bytes of an incomplete character are dropped so the result is always
    /// a valid string whose token count is at most `max_tokens`.
    pub fn truncate_to_tokens(&self, text: &str, max_tokens: usize) -> String {
        let ids = self.tokenize(text);
        if ids.len() <= max_tokens {
            return text.to_string();
        }
        let mut bytes = Vec::new();
        for &id in &ids[..max_tokens] {
            if id < BYTE_OFFSET {
                bytes.extend_from_slice(SPECIAL_TOKENS[id as usize].as_bytes());
            } else {
                bytes.push((id - BYTE_OFFSET) as u8);
            }
        }
        while !bytes.is_empty() && std::str::from_utf8(&bytes).is_err() {
            bytes.pop();
        }
        String::from_utf8(bytes).expect("prefix reduced to a UTF-8 boundary")
    }
}
