//! Independent oracles shared by the oracle-conformance and acceptance
//! suites. These recompute reference values through different machinery than
//! the implementations they check (exact rationals, full-matrix DP).

use num_rational::Ratio;
use num_traits::Zero;
use stqa_core::phoc::{PHOC_BIGRAMS, PHOC_DIM, PHOC_LEVELS};
use stqa_core::types::BoundingBox;

type Q = Ratio<i64>;

fn interval_overlap(a: (Q, Q), b: (Q, Q)) -> Q {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if hi > lo {
        hi - lo
    } else {
        Q::zero()
    }
}

fn char_index(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize),
        '0'..='9' => Some(26 + c as usize - '0' as usize),
        _ => None,
    }
}

/// Brute-force PHOC over rational character-interval/region intersections:
/// the unit spanning `[i/n, (i+span)/n)` joins region `[r/L, (r+1)/L)` when
/// their overlap is at least half the unit's width (ties included).
pub fn phoc_oracle(text: &str) -> Vec<f64> {
    let lowered = text.to_lowercase();
    let chars: Vec<(usize, char)> = lowered
        .chars()
        .filter(|c| char_index(*c).is_some())
        .enumerate()
        .collect();
    let mut out = vec![0.0; PHOC_DIM];
    let n = chars.len() as i64;
    if n == 0 {
        return out;
    }

    let unit = |i: i64, span: i64| (Q::new(i, n), Q::new(i + span, n));
    let region = |r: i64, l: i64| (Q::new(r, l), Q::new(r + 1, l));
    let occupies = |i: i64, span: i64, r: i64, l: i64| -> bool {
        let u = unit(i, span);
        let half_width = (u.1 - u.0) / Q::from_integer(2);
        interval_overlap(u, region(r, l)) >= half_width
    };

    let mut offset = 0usize;
    for &level in &PHOC_LEVELS {
        for &(i, c) in &chars {
            let ci = char_index(c).unwrap();
            for r in 0..level {
                if occupies(i as i64, 1, r as i64, level as i64) {
                    out[offset + r * 36 + ci] = 1.0;
                }
            }
        }
        offset += level * 36;
    }

    for w in chars.windows(2) {
        let pair: String = [w[0].1, w[1].1].iter().collect();
        if let Some(b) = PHOC_BIGRAMS.iter().position(|&x| x == pair) {
            let i = w[0].0 as i64;
            for r in 0..2i64 {
                if occupies(i, 2, r, 2) {
                    out[504 + r as usize * 50 + b] = 1.0;
                }
            }
        }
    }
    out
}

/// Full-matrix Levenshtein DP (the implementation uses a two-row variant).
pub fn levenshtein_oracle(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        dp[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            dp[i][j] = (dp[i - 1][j] + 1)
                .min(dp[i][j - 1] + 1)
                .min(dp[i - 1][j - 1] + cost);
        }
    }
    dp[a.len()][b.len()]
}

/// A box whose coordinates are exact rationals (and exactly representable in
/// f64 when the denominator is a power of two).
#[derive(Clone, Copy, Debug)]
pub struct RationalBox {
    pub x1: Q,
    pub y1: Q,
    pub x2: Q,
    pub y2: Q,
}

impl RationalBox {
    pub fn on_grid(x1: i64, y1: i64, x2: i64, y2: i64, denom: i64) -> Self {
        Self {
            x1: Q::new(x1, denom),
            y1: Q::new(y1, denom),
            x2: Q::new(x2, denom),
            y2: Q::new(y2, denom),
        }
    }

    pub fn to_f64(self) -> BoundingBox {
        let f = |q: Q| *q.numer() as f64 / *q.denom() as f64;
        BoundingBox { x1: f(self.x1), y1: f(self.y1), x2: f(self.x2), y2: f(self.y2) }
    }
}

/// Exact rational IoU; zero-area boxes score 0 by the shared convention.
pub fn iou_oracle(a: &RationalBox, b: &RationalBox) -> f64 {
    let zero = Q::zero();
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(zero);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(zero);
    let inter = ix * iy;
    let area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
    let area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
    let union = area_a + area_b - inter;
    if union <= zero {
        return 0.0;
    }
    let iou = inter / union;
    *iou.numer() as f64 / *iou.denom() as f64
}

/// Deterministic random alphanumeric string (with occasional punctuation and
/// unicode when `spice` is set).
pub fn random_word(rng: &mut impl rand::Rng, max_len: usize, spice: bool) -> String {
    const AL: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let len = rng.gen_range(0..=max_len);
    let mut s = String::new();
    for _ in 0..len {
        if spice && rng.gen_bool(0.08) {
            s.push(['.', '-', ' ', 'é', 'ß', '中'][rng.gen_range(0..6)]);
        } else {
            s.push(AL[rng.gen_range(0..AL.len())] as char);
        }
    }
    s
}
