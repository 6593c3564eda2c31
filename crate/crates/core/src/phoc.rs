//! Pyramidal histogram of characters (PHOC), 604 bits.
//!
//! Layout: pyramid levels 2, 3, 4, 5 over the 36-character alphabet
//! `[a-z0-9]` (14 regions × 36 = 504 bits), followed by level-2 occupancy of
//! the 50 most common English bigrams (2 × 50 = 100 bits).
//!
//! Region membership: the occupying unit (character `i` of an `n`-character
//! word spans `[i/n, (i+1)/n)`; a bigram spans both its characters) belongs
//! to a pyramid region when the interval overlap is at least half the unit's
//! own width. Ties count as membership. All comparisons are done in exact
//! integer units of `1/(n·level)`, so the encoding is deterministic down to
//! the bit.

pub const PHOC_DIM: usize = 604;
pub const PHOC_LEVELS: [usize; 4] = [2, 3, 4, 5];
pub const PHOC_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

/// The 50 most common English bigrams, frequency order.
pub const PHOC_BIGRAMS: [&str; 50] = [
    "th", "he", "in", "er", "an", "re", "on", "at", "en", "nd", //
    "ti", "es", "or", "te", "of", "ed", "is", "it", "al", "ar", //
    "st", "to", "nt", "ng", "se", "ha", "as", "ou", "io", "le", //
    "ve", "co", "me", "de", "hi", "ri", "ro", "ic", "ne", "ea", //
    "ra", "ce", "li", "ch", "ll", "be", "ma", "si", "om", "ur",
];

fn char_index(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize),
        '0'..='9' => Some(26 + c as usize - '0' as usize),
        _ => None,
    }
}

fn bigram_index(pair: &str) -> Option<usize> {
    PHOC_BIGRAMS.iter().position(|&b| b == pair)
}

/// Does the unit spanning characters `[i, i+span)` of an `n`-character word
/// occupy region `r` of a `level`-region pyramid?
///
/// Working in integer units of `1/(n·level)`: the unit covers
/// `[i·level, (i+span)·level)`, the region covers `[r·n, (r+1)·n)`, and
/// membership requires `2·overlap ≥ span·level`.
fn occupies(i: usize, span: usize, n: usize, level: usize, r: usize) -> bool {
    let (u_lo, u_hi) = (i * level, (i + span) * level);
    let (r_lo, r_hi) = (r * n, (r + 1) * n);
    let overlap = u_hi.min(r_hi).saturating_sub(u_lo.max(r_lo));
    2 * overlap >= span * level
}

/// Encode a word as its 604-bit PHOC descriptor (entries are exactly 0 or 1).
///
/// Text is lowercased and characters outside `[a-z0-9]` are dropped before
/// encoding; empty or all-garbage input yields the zero vector.
pub fn phoc_encode(text: &str) -> Vec<f64> {
    let mut out = vec![0.0; PHOC_DIM];
    let chars: Vec<usize> = text
        .to_lowercase()
        .chars()
        .filter_map(char_index)
        .collect();
    let n = chars.len();
    if n == 0 {
        return out;
    }

    let mut offset = 0;
    for &level in &PHOC_LEVELS {
        for (i, &c) in chars.iter().enumerate() {
            for r in 0..level {
                if occupies(i, 1, n, level, r) {
                    out[offset + r * 36 + c] = 1.0;
                }
            }
        }
        offset += level * 36;
    }
    debug_assert_eq!(offset, 504);

    let lowered: Vec<char> = text
        .to_lowercase()
        .chars()
        .filter(|c| char_index(*c).is_some())
        .collect();
    for i in 0..n.saturating_sub(1) {
        let pair: String = lowered[i..i + 2].iter().collect();
        if let Some(b) = bigram_index(&pair) {
            for r in 0..2 {
                if occupies(i, 2, n, 2, r) {
                    out[504 + r * 50 + b] = 1.0;
                }
            }
        }
    }
    out
}
