//! Evaluation: exact-match accuracy, ANLS, box IoU hit rates, and grounded QA
//! accuracy under Top `k_t × k_s` candidate regimes.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::io::{AnnotatedEpisode, Prediction};
use crate::text::normalize_answer;
use crate::types::{BoundingBox, GroundingAnnotation, GroundingResult};

/// 1 iff the normalized prediction equals any normalized ground truth.
/// Normalization: lowercase, trim, collapse internal whitespace.
pub fn exact_match(pred: &str, answers: &[String]) -> u8 {
    let p = normalize_answer(pred);
    u8::from(answers.iter().any(|a| normalize_answer(a) == p))
}

/// Character-level Levenshtein distance (two-row DP over Unicode scalars).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ANLS_THRESHOLD: f64 = 0.5;

/// Max over answers of `1 − NL(pred, answer)` with scores below `threshold`
/// zeroed, where `NL` is the length-normalized Levenshtein distance over the
/// normalized strings.
pub fn anls(pred: &str, answers: &[String], threshold: f64) -> f64 {
    let p = normalize_answer(pred);
    let mut best = 0.0f64;
    for a in answers {
        let a = normalize_answer(a);
        let max_len = p.chars().count().max(a.chars().count());
        let sim = if max_len == 0 {
            1.0
        } else {
            1.0 - levenshtein(&p, &a) as f64 / max_len as f64
        };
        let sim = if sim < threshold { 0.0 } else { sim };
        best = best.max(sim);
    }
    best
}

/// Intersection over union. Zero-area boxes score 0 by convention.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Best IoU across ranked `(frame, ranked boxes)` candidates against the
/// per-frame ground-truth boxes; frames without a ground-truth box
/// contribute 0 (a temporal miss is a spatial miss).
fn best_iou_ranked(
    ranked: &[(usize, Vec<BoundingBox>)],
    gt: &GroundingAnnotation,
) -> f64 {
    let mut best = 0.0f64;
    for (frame, boxes) in ranked {
        if let Some(gt_box) = gt.boxes.get(frame) {
            for b in boxes {
                best = best.max(box_iou(b, gt_box));
            }
        }
    }
    best
}

/// `(hit, best_iou)` for a grounding result under the `k_t × k_s` regime.
pub fn grounding_hit(
    pred: &GroundingResult,
    gt: &GroundingAnnotation,
    k_t: usize,
    k_s: usize,
    tau: f64,
) -> (u8, f64) {
    let ranked: Vec<(usize, Vec<BoundingBox>)> = pred
        .frames
        .iter()
        .take(k_t)
        .map(|fs| {
            let boxes = pred
                .boxes
                .get(&fs.frame)
                .map(|toks| toks.iter().take(k_s).map(|t| t.token.bbox).collect())
                .unwrap_or_default();
            (fs.frame, boxes)
        })
        .collect();
    let best = best_iou_ranked(&ranked, gt);
    (u8::from(best >= tau), best)
}

/// Same, for a prediction loaded from disk.
pub fn grounding_hit_prediction(
    pred: &Prediction,
    gt: &GroundingAnnotation,
    k_t: usize,
    k_s: usize,
    tau: f64,
) -> (u8, f64) {
    let ranked: Vec<(usize, Vec<BoundingBox>)> = pred
        .top_boxes(k_t, k_s)
        .into_iter()
        .map(|(frame, rows)| (frame, rows.into_iter().map(|(b, _)| b).collect()))
        .collect();
    let best = best_iou_ranked(&ranked, gt);
    (u8::from(best >= tau), best)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QuestionRecord {
    pub id: String,
    pub exact: u8,
    pub anls: f64,
    pub best_iou: f64,
    /// `(τ, hit)` per threshold.
    pub hits: Vec<(f64, u8)>,
}

/// Aggregate evaluation report. Percentages are in `[0, 100]`, ANLS in
/// `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    /// `(k_t, k_s)`.
    pub regime: (usize, usize),
    pub n: usize,
    pub acc: f64,
    pub anls: f64,
    /// `(τ, hit-rate %)` per threshold.
    pub iou_hit: Vec<(f64, f64)>,
    /// `(τ, grounded-QA %)` per threshold.
    pub gqa: Vec<(f64, f64)>,
    /// Mean best-IoU, for inspection (hit rates are the headline metric).
    pub mean_iou: f64,
    pub per_question: Vec<QuestionRecord>,
}

impl MetricReport {
    pub fn iou_at(&self, tau: f64) -> f64 {
        lookup(&self.iou_hit, tau)
    }

    pub fn gqa_at(&self, tau: f64) -> f64 {
        lookup(&self.gqa, tau)
    }

    /// Aligned-column text table, percentages to two decimals.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "regime", "IoU@0.5", "IoU@0.3", "Acc", "ANLS", "GQA@0.5", "GQA@0.3"
        ));
        s.push_str(&format!(
            "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>8.4} {:>8.2} {:>8.2}\n",
            format!("Top {}x{}", self.regime.0, self.regime.1),
            self.iou_at(0.5),
            self.iou_at(0.3),
            self.acc,
            self.anls,
            self.gqa_at(0.5),
            self.gqa_at(0.3),
        ));
        s
    }
}

fn lookup(pairs: &[(f64, f64)], tau: f64) -> f64 {
    pairs
        .iter()
        .find(|(t, _)| (t - tau).abs() < 1e-9)
        .map(|&(_, v)| v)
        .unwrap_or(f64::NAN)
}

pub const DEFAULT_TAUS: [f64; 2] = [0.3, 0.5];

/// Aggregate per-question exact match, ANLS, and grounding hits.
/// `GQA@τ` counts questions with exact match *and* a grounding hit at τ.
/// Every prediction must have a matching annotation id.
pub fn evaluate(
    preds: &BTreeMap<String, Prediction>,
    gts: &BTreeMap<String, AnnotatedEpisode>,
    regime: (usize, usize),
    taus: &[f64],
) -> Result<MetricReport> {
    let missing: Vec<&String> = preds.keys().filter(|id| !gts.contains_key(*id)).collect();
    if !missing.is_empty() {
        return Err(CoreError::Validation(format!(
            "predictions without matching annotations: {missing:?}"
        )));
    }
    let (k_t, k_s) = regime;
    if k_t == 0 || k_s == 0 {
        return Err(CoreError::Config("regime must be at least 1x1".into()));
    }
    let mut records = Vec::with_capacity(preds.len());
    for (id, pred) in preds {
        let gt = &gts[id];
        let ann = gt.annotation()?;
        let exact = exact_match(&pred.pred_answer, &gt.answers);
        let score = anls(&pred.pred_answer, &gt.answers, ANLS_THRESHOLD);
        let (_, best) = grounding_hit_prediction(pred, &ann, k_t, k_s, 0.0);
        let hits: Vec<(f64, u8)> = taus.iter().map(|&t| (t, u8::from(best >= t))).collect();
        records.push(QuestionRecord { id: id.clone(), exact, anls: score, best_iou: best, hits });
    }
    let n = records.len();
    let nf = n.max(1) as f64;
    let pct = |count: usize| 100.0 * count as f64 / nf;
    let acc = pct(records.iter().filter(|r| r.exact == 1).count());
    let mean_anls = records.iter().map(|r| r.anls).sum::<f64>() / nf;
    let mean_iou = records.iter().map(|r| r.best_iou).sum::<f64>() / nf;
    let mut iou_hit = Vec::new();
    let mut gqa = Vec::new();
    for &t in taus {
        let hit = records
            .iter()
            .filter(|r| r.hits.iter().any(|&(tt, h)| tt == t && h == 1))
            .count();
        let both = records
            .iter()
            .filter(|r| r.exact == 1 && r.hits.iter().any(|&(tt, h)| tt == t && h == 1))
            .count();
        iou_hit.push((t, pct(hit)));
        gqa.push((t, pct(both)));
    }
    Ok(MetricReport {
        regime,
        n,
        acc,
        anls: mean_anls,
        iou_hit,
        gqa,
        mean_iou,
        per_question: records,
    })
}
