//! Training objective: InfoNCE-style contrastive loss over the three decoder
//! branches plus multi-label binary cross-entropy, combined as
//! `L = L_bce + λ·L_cons`.
//!
//! Answers are compared through [`answer_repr`]: the per-step sigmoid
//! probability vectors over `[vocabulary; OCR candidates]`, candidate blocks
//! zero-padded to a common width so branches with different candidate counts
//! stay comparable, flattened to one row. Cosine similarity over these
//! representations is differentiable and fixed-width.

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::decode::StepTargets;
use crate::error::{CoreError, Result};
use crate::tensor::{softplus, Mat, Tape, Tx};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    /// Contrastive temperature τ.
    pub tau: f64,
    /// Trade-off weight λ.
    pub lambda: f64,
    /// Also apply BCE to the anchor (full-input) branch.
    pub anchor_bce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.1, lambda: 100.0, anchor_bce: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(CoreError::Config("tau must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(CoreError::Config("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// Flatten one branch's step probabilities into a `1 × steps·(V + pad_width)`
/// answer representation. `pad_width` must be at least the candidate count.
pub fn answer_repr(
    tape: &mut Tape,
    voc_logits: Tx,
    ocr_logits: Option<Tx>,
    pad_width: usize,
) -> Tx {
    let (steps, v) = tape.shape(voc_logits);
    let m = ocr_logits.map(|o| tape.shape(o).1).unwrap_or(0);
    assert!(pad_width >= m, "pad_width {pad_width} below candidate count {m}");
    let mut parts = vec![tape.sigmoid(voc_logits)];
    if let Some(o) = ocr_logits {
        parts.push(tape.sigmoid(o));
    }
    if pad_width > m {
        parts.push(tape.constant(Mat::zeros((steps, pad_width - m))));
    }
    let full = tape.concat_cols(&parts);
    tape.reshape(full, 1, steps * (v + pad_width))
}

/// `−log( e^{s⁺/τ} / (e^{s⁺/τ} + e^{s⁻/τ}) )` with `s± = cosine(Y±, Y)`,
/// computed in the stable softplus form.
pub fn contrastive_loss(
    tape: &mut Tape,
    y_pos: Tx,
    y_anchor: Tx,
    y_neg: Tx,
    tau: f64,
) -> Result<Tx> {
    if !(tau > 0.0) {
        return Err(CoreError::Config("tau must be positive".into()));
    }
    for (name, t) in [("positive", y_pos), ("anchor", y_anchor), ("negative", y_neg)] {
        let norm: f64 = tape.value(t).iter().map(|v| v * v).sum::<f64>();
        if norm == 0.0 {
            return Err(CoreError::Validation(format!(
                "zero-norm {name} answer representation"
            )));
        }
        let (r, _) = tape.shape(t);
        if r != 1 || tape.shape(t).1 != tape.shape(y_anchor).1 {
            return Err(CoreError::Validation(
                "answer representations must be equal-width rows".into(),
            ));
        }
    }
    let s_pos = tape.cosine(y_pos, y_anchor);
    let s_neg = tape.cosine(y_neg, y_anchor);
    let diff = tape.sub(s_neg, s_pos);
    let scaled = tape.scale(diff, 1.0 / tau);
    Ok(tape.softplus(scaled))
}

/// Closed-form value of the contrastive loss from the two similarities.
pub fn contrastive_from_sims(s_pos: f64, s_neg: f64, tau: f64) -> f64 {
    softplus((s_neg - s_pos) / tau)
}

/// Mean stable BCE over the supervised (step, class) cells of one branch.
/// Logit width is `vocab + #candidates`; the target matrix's padding columns
/// carry zero mask and are excluded.
pub fn bce_loss(
    tape: &mut Tape,
    voc_logits: Tx,
    ocr_logits: Option<Tx>,
    targets: &StepTargets,
) -> Result<Tx> {
    let logits = match ocr_logits {
        Some(o) => tape.concat_cols(&[voc_logits, o]),
        None => voc_logits,
    };
    let (steps, width) = tape.shape(logits);
    let tshape = targets.targets.shape();
    if tshape[0] != steps || tshape[1] < width {
        return Err(CoreError::Validation(format!(
            "target shape {:?} incompatible with logits {}×{}",
            tshape, steps, width
        )));
    }
    let t = targets.targets.slice(s![.., 0..width]).to_owned();
    let m = targets.mask.slice(s![.., 0..width]).to_owned();
    if t.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(CoreError::Validation("targets must be binary".into()));
    }
    Ok(tape.bce_with_logits_mean(logits, &t, &m))
}

/// `L = L_bce + λ·L_cons`. With `cons = None` (or λ = 0) this reduces to
/// BCE only.
pub fn total_loss(tape: &mut Tape, bce: Tx, cons: Option<Tx>, lambda: f64) -> Tx {
    match cons {
        Some(c) if lambda != 0.0 => {
            let weighted = tape.scale(c, lambda);
            tape.add(bce, weighted)
        }
        _ => bce,
    }
}
