//! Token estimation and overlapping window chunking.
//!
//! Offsets are counted in Unicode scalar values ("characters"), the same
//! unit the token estimator uses, so a window of `n` tokens is exactly
//! `4n` characters.

use alloc::vec::Vec;

pub const CHARS_PER_TOKEN: usize = 4;

/// Heuristic token count: `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(CHARS_PER_TOKEN)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ChunkError {
    #[error("chunk window must be at least one token")]
    ZeroWindow,
    #[error("overlap of {overlap} tokens must be smaller than the {window}-token window")]
    OverlapTooLarge { window: usize, overlap: usize },
}

/// A half-open character range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Window spans over `char_len` characters. Consecutive spans start
/// `window - overlap` tokens apart and the last one ends at `char_len`.
pub fn chunk_spans(char_len: usize, window_tokens: usize, overlap_tokens: usize) -> Result<Vec<Span>, ChunkError> {
    if window_tokens == 0 {
        return Err(ChunkError::ZeroWindow);
    }
    if overlap_tokens >= window_tokens {
        return Err(ChunkError::OverlapTooLarge {
            window: window_tokens,
            overlap: overlap_tokens,
        });
    }
    let window = window_tokens * CHARS_PER_TOKEN;
    let stride = (window_tokens - overlap_tokens) * CHARS_PER_TOKEN;
    let mut spans = Vec::new();
    let mut start = 0;
    while start < char_len {
        let end = (start + window).min(char_len);
        spans.push(Span { start, end });
        if end == char_len {
            break;
        }
        start += stride;
    }
    Ok(spans)
}

/// A borrowed window of text with its character span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextChunk<'a> {
    pub span: Span,
    pub text: &'a str,
}

/// Splits `text` into overlapping windows of at most `window_tokens`
/// estimated tokens.
pub fn chunk_text(text: &str, window_tokens: usize, overlap_tokens: usize) -> Result<Vec<TextChunk<'_>>, ChunkError> {
    let offsets = CharOffsets::new(text);
    let spans = chunk_spans(offsets.char_len(), window_tokens, overlap_tokens)?;
    Ok(spans
        .into_iter()
        .map(|span| TextChunk {
            span,
            text: offsets.slice(text, span),
        })
        .collect())
}

/// Maps character offsets to byte offsets of one string.
#[derive(Debug, Clone)]
pub struct CharOffsets {
    bytes: Vec<usize>,
}

impl CharOffsets {
    pub fn new(text: &str) -> Self {
        let mut bytes: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        bytes.push(text.len());
        CharOffsets { bytes }
    }

    pub fn char_len(&self) -> usize {
        self.bytes.len() - 1
    }

    pub fn byte(&self, char_offset: usize) -> usize {
        self.bytes[char_offset]
    }

    pub fn slice<'a>(&self, text: &'a str, span: Span) -> &'a str {
        &text[self.byte(span.start)..self.byte(span.end)]
    }
}
