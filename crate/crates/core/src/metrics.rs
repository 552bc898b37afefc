//! Exact match and edit similarity.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Strips each line's edges and drops blank lines at both ends.
pub fn normalize(text: &str) -> String {
    let lines: Vec<&str> = text.split('\n').map(str::trim).collect();
    let start = lines.iter().position(|l| !l.is_empty()).unwrap_or(lines.len());
    let end = lines.iter().rposition(|l| !l.is_empty()).map_or(start, |i| i + 1);
    lines[start..end].join("\n")
}

pub fn exact_match(pred: &str, reference: &str) -> bool {
    normalize(pred) == normalize(reference)
}

/// Character-level Levenshtein distance, two-row dynamic programming.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - levenshtein / max_len` over normalized text; 1 when both are empty.
pub fn edit_similarity(pred: &str, reference: &str) -> f64 {
    raw_edit_similarity(&normalize(pred), &normalize(reference))
}

/// Edit similarity without normalization.
pub fn raw_edit_similarity(a: &str, b: &str) -> f64 {
    let max = a.chars().count().max(b.chars().count());
    if max == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / max as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn em_examples() {
        assert!(exact_match("x = 1", "x = 1"));
        assert!(!exact_match("x = 1", "x = 2"));
        assert!(exact_match("  x = 1\n", "x = 1"));
        assert!(exact_match("\n\n  a\n\tb  \n\n", "a\nb"));
        assert!(!exact_match("a\n\nb", "a\nb"));
    }

    #[test]
    fn es_examples() {
        assert_eq!(edit_similarity("abc", "abc"), 1.0);
        assert!((edit_similarity("abc", "abd") - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(edit_similarity("abc", ""), 0.0);
        assert_eq!(edit_similarity("", "  "), 1.0);
    }

    #[test]
    fn levenshtein_classic() {
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("flaw", "lawn"), 2);
        assert_eq!(levenshtein("héllo", "hello"), 1);
    }
}
