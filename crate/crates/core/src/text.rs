//! Text normalization shared by tokenization, target matching, and metrics.

/// Lowercase and split on whitespace and punctuation: tokens are maximal
/// alphanumeric runs. `"30 M.P.H."` → `["30", "m", "p", "h"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Word comparison key: lowercase with punctuation stripped.
pub fn word_key(word: &str) -> String {
    word.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect()
}

/// Answer-string normalization for exact match: lowercase, trim, collapse
/// internal whitespace. Punctuation is preserved.
pub fn normalize_answer(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(tokenize("30 M.P.H."), vec!["30", "m", "p", "h"]);
        assert_eq!(tokenize("  what's  here? "), vec!["what", "s", "here"]);
        assert!(tokenize("  ... ").is_empty());
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("  Stop "), "stop");
        assert_eq!(normalize_answer("30  m.p.h."), "30 m.p.h.");
        assert_eq!(word_key("M.P.H."), "mph");
    }
}
