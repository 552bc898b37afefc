//! Lexical token helpers shared by retrieval, budgeting and the mocks.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};

/// Set of identifier-like tokens.
pub type TokenSet = BTreeSet<String>;

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Maximal runs of alphanumeric/underscore characters, in order, with repeats.
pub fn identifier_runs(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !is_word_char(c)).filter(|s| !s.is_empty())
}

/// Identifier token set (case-sensitive, deduplicated).
pub fn identifier_set(text: &str) -> TokenSet {
    identifier_runs(text).map(ToString::to_string).collect()
}

/// Byte spans of fallback tokens: identifier runs plus one token per
/// punctuation character. Whitespace separates and is never a token.
pub fn fallback_spans(text: &str) -> impl Iterator<Item = (usize, usize)> + '_ {
    let mut iter = text.char_indices().peekable();
    core::iter::from_fn(move || {
        while let Some(&(_, c)) = iter.peek() {
            if c.is_whitespace() {
                iter.next();
            } else {
                break;
            }
        }
        let (start, c) = iter.next()?;
        if !is_word_char(c) {
            return Some((start, start + c.len_utf8()));
        }
        let mut end = start + c.len_utf8();
        while let Some(&(i, c)) = iter.peek() {
            if is_word_char(c) {
                end = i + c.len_utf8();
                iter.next();
            } else {
                break;
            }
        }
        Some((start, end))
    })
}

/// Local approximation of a model tokenizer.
pub fn fallback_token_count(text: &str) -> usize {
    fallback_spans(text).count()
}

/// Prefix of `text` ending after its `n`-th fallback token.
pub fn truncate_to_tokens(text: &str, n: usize) -> &str {
    if n == 0 {
        return "";
    }
    match fallback_spans(text).nth(n - 1) {
        Some((_, end)) => &text[..end],
        None => text,
    }
}

/// Identifier with its last `_`-separated segment removed.
///
/// `fetch_user_v2` has stem `fetch_user`; identifiers without an inner
/// underscore have no stem.
pub fn stem(token: &str) -> Option<&str> {
    let idx = token.rfind('_')?;
    let head = &token[..idx];
    if head.is_empty() || idx + 1 == token.len() {
        None
    } else {
        Some(head)
    }
}
