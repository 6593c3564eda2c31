//! Two-stage contrastive temporal-to-spatial grounding.
//!
//! Temporal stage: correlation scores between every frame and the pooled
//! question give a positive and an independent negative distribution; a
//! per-frame binary Gumbel-Softmax assigns each frame to the positive or
//! negative class; the top `K1` positives (highest positive score) and top
//! `K1` negatives (lowest negative score) are kept. Spatial stage: the same
//! machinery runs per selected frame over its OCR tokens with shared
//! parameters, keeping `K2` tokens per frame.
//!
//! Selected features are gated by their (straight-through) mask values, so
//! hard selection stays trainable. With `K1 ≥ T` (or `K2 ≥ S`) the class
//! assignment is bypassed and every candidate passes ungated — the
//! grounding-disabled ablations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encode::{Encoded, TokenRef};
use crate::error::{CoreError, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::{Mat, Tape, Tx};
use crate::types::{Episode, FrameScore, GroundingResult, ScoredToken};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GroundingConfig {
    /// Frames to select per class.
    pub k1: usize,
    /// OCR tokens to select per selected frame.
    pub k2: usize,
    pub gumbel_temperature: f64,
    /// Hard one-hot masks with straight-through gradients; soft rows otherwise.
    pub hard_selection: bool,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self { k1: 5, k2: 5, gumbel_temperature: 1.0, hard_selection: true }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 {
            return Err(CoreError::Config("K1 and K2 must be at least 1".into()));
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(CoreError::Config("Gumbel temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Gumbel noise source for the selection masks. `Off` gives deterministic
/// argmax routing (evaluation mode).
pub enum Noise {
    Off,
    Stream(ChaCha8Rng),
}

impl Noise {
    fn sample(&mut self, rows: usize) -> Option<Mat> {
        match self {
            Noise::Off => None,
            Noise::Stream(rng) => Some(Mat::from_shape_fn((rows, 2), |_| {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                -(-u.ln()).ln()
            })),
        }
    }
}

/// Value-level selection state for one classification pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionScores {
    /// Positive attention distribution over candidates (sums to 1).
    pub pos: Vec<f64>,
    /// Negative attention distribution over candidates (sums to 1).
    pub neg: Vec<f64>,
    /// Per-candidate `[positive, negative]` mask row (rows sum to 1;
    /// one-hot under hard selection).
    pub mask: Vec<[f64; 2]>,
}

/// Ranked indices for one class after filtering.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassSelection {
    /// `(candidate index, ranking score)` in rank order.
    pub ranked: Vec<(usize, f64)>,
    /// True when the class was empty and the global fallback was used.
    pub fallback: bool,
}

/// Both classes after filtering.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub pos: ClassSelection,
    pub neg: ClassSelection,
}

/// Rank the positive class by score descending and the negative class by
/// score ascending, ties broken by lower index, truncated to `k`. An empty
/// class falls back to the global ranking by the relevant score, flagged.
/// With `k >= n` the class assignment is bypassed and every candidate is
/// ranked (grounding disabled).
pub fn filter_candidates(pos: &[f64], neg: &[f64], mask: &[[f64; 2]], k: usize) -> FilterOutcome {
    let n = pos.len();
    debug_assert_eq!(neg.len(), n);
    debug_assert_eq!(mask.len(), n);
    let bypass = k >= n;

    let rank = |scores: &[f64], members: Vec<usize>, ascending: bool| -> Vec<(usize, f64)> {
        let mut items: Vec<(usize, f64)> = members.into_iter().map(|i| (i, scores[i])).collect();
        items.sort_by(|a, b| {
            let ord = if ascending { a.1.total_cmp(&b.1) } else { b.1.total_cmp(&a.1) };
            ord.then(a.0.cmp(&b.0))
        });
        items.truncate(k);
        items
    };

    let class_members = |class: usize| -> Vec<usize> {
        (0..n)
            .filter(|&i| {
                let row = mask[i];
                let argmax = if row[1] > row[0] { 1 } else { 0 };
                argmax == class
            })
            .collect()
    };

    let all: Vec<usize> = (0..n).collect();
    let (pos_members, neg_members) = if bypass {
        (all.clone(), all.clone())
    } else {
        (class_members(0), class_members(1))
    };

    let pos_sel = if pos_members.is_empty() {
        ClassSelection { ranked: rank(pos, all.clone(), false), fallback: true }
    } else {
        ClassSelection { ranked: rank(pos, pos_members, false), fallback: false }
    };
    let neg_sel = if neg_members.is_empty() {
        ClassSelection { ranked: rank(neg, all, true), fallback: true }
    } else {
        ClassSelection { ranked: rank(neg, neg_members, true), fallback: false }
    };
    FilterOutcome { pos: pos_sel, neg: neg_sel }
}

/// One branch (positive or negative) of the grounding output, carrying both
/// the gated tape features for the decoder and the value-level result.
pub struct SelectedBranch {
    /// Selected frame indices in rank order.
    pub frame_indices: Vec<usize>,
    /// Gated selected frame features, `len(frame_indices) × d`.
    pub frame_feats: Tx,
    /// Gated selected token features, one block per selected frame.
    pub token_feats: Tx,
    /// Flattened-episode references aligned with `token_feats` rows.
    pub token_refs: Vec<TokenRef>,
    pub result: GroundingResult,
}

pub struct GroundOutcome {
    pub pos: SelectedBranch,
    pub neg: SelectedBranch,
    /// Temporal selection state (for inspection and invariants).
    pub temporal: SelectionScores,
}

pub struct Grounder {
    w9: usize,
    w10: usize,
    w11: usize,
    w12: usize,
    sw9: usize,
    sw10: usize,
    sw11: usize,
    sw12: usize,
}

impl Grounder {
    pub fn new(d: usize, store: &mut ParamStore) -> Self {
        Self {
            w9: store.register("tg.w9", d, d, Init::Xavier),
            w10: store.register("tg.w10", d, d, Init::Xavier),
            w11: store.register("tg.w11", d, d, Init::Xavier),
            w12: store.register("tg.w12", d, d, Init::Xavier),
            sw9: store.register("sg.w9", d, d, Init::Xavier),
            sw10: store.register("sg.w10", d, d, Init::Xavier),
            sw11: store.register("sg.w11", d, d, Init::Xavier),
            sw12: store.register("sg.w12", d, d, Init::Xavier),
        }
    }

    /// Positive and negative relevance distributions over frames,
    /// `pos = softmax((F·W9)·(q_g·W10)ᵀ)`, independent weights for `neg`.
    pub fn score_frames(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f: Tx,
        q_g: Tx,
    ) -> (Tx, Tx) {
        let pos = score_pair(tape, store, f, q_g, self.w9, self.w10);
        let neg = score_pair(tape, store, f, q_g, self.w11, self.w12);
        (pos, neg)
    }

    /// Spatial analogue over one frame's tokens; parameters shared across frames.
    pub fn score_tokens(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Tx,
        q_g: Tx,
    ) -> (Tx, Tx) {
        let pos = score_pair(tape, store, tokens, q_g, self.sw9, self.sw10);
        let neg = score_pair(tape, store, tokens, q_g, self.sw11, self.sw12);
        (pos, neg)
    }

    /// Full temporal-to-spatial grounding for one encoded episode.
    pub fn ground(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoded: &Encoded,
        episode: &Episode,
        q_g: Tx,
        cfg: &GroundingConfig,
        noise: &mut Noise,
    ) -> Result<GroundOutcome> {
        cfg.validate()?;
        let (t_len, d) = tape.shape(encoded.f);
        if t_len == 0 {
            return Err(CoreError::Validation("episode with zero frames".into()));
        }

        let (pos, neg) = self.score_frames(tape, store, encoded.f, q_g);
        let noise_mat = noise.sample(t_len);
        let mask = contrastive_mask(
            tape,
            pos,
            neg,
            cfg.gumbel_temperature,
            cfg.hard_selection,
            noise_mat.as_ref(),
        );

        let pos_vals = col_vec(tape, pos);
        let neg_vals = col_vec(tape, neg);
        let mask_vals = mask_rows(tape, mask);
        let filtered = filter_candidates(&pos_vals, &neg_vals, &mask_vals, cfg.k1);
        let bypass_temporal = cfg.k1 >= t_len;

        let temporal = SelectionScores { pos: pos_vals.clone(), neg: neg_vals.clone(), mask: mask_vals };

        let pos_branch = self.build_branch(
            tape, store, encoded, episode, q_g, cfg, noise, &filtered.pos, mask, 0,
            &pos_vals, bypass_temporal, d,
        )?;
        let neg_branch = self.build_branch(
            tape, store, encoded, episode, q_g, cfg, noise, &filtered.neg, mask, 1,
            &neg_vals, bypass_temporal, d,
        )?;

        Ok(GroundOutcome { pos: pos_branch, neg: neg_branch, temporal })
    }

    #[allow(clippy::too_many_arguments)]
    fn build_branch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoded: &Encoded,
        episode: &Episode,
        q_g: Tx,
        cfg: &GroundingConfig,
        noise: &mut Noise,
        selection: &ClassSelection,
        frame_mask: Tx,
        class: usize,
        rank_scores: &[f64],
        bypass_temporal: bool,
        d: usize,
    ) -> Result<SelectedBranch> {
        let frame_indices: Vec<usize> = selection.ranked.iter().map(|&(i, _)| i).collect();

        // Gate selected frame rows by their mask value for this class
        // (constant 1 when grounding is bypassed or the fallback fired).
        let frames = tape.gather_rows(encoded.f, &frame_indices);
        let frame_feats = if bypass_temporal || selection.fallback {
            frames
        } else {
            let mask_col = tape.slice_cols(frame_mask, class, class + 1);
            let gathered = tape.gather_rows(mask_col, &frame_indices);
            tape.mul_col(frames, gathered)
        };

        // Spatial grounding per selected frame, in rank order.
        let mut token_feats_parts: Vec<Tx> = Vec::new();
        let mut token_refs: Vec<TokenRef> = Vec::new();
        let mut result = GroundingResult::default();
        for &(frame, score) in &selection.ranked {
            // stored negative-branch scores are negated so rankings stay
            // non-increasing in the stored value
            let stored = if class == 0 { score } else { -score };
            result.frames.push(FrameScore { frame, score: stored });

            let local: Vec<usize> = encoded
                .tokens
                .iter()
                .enumerate()
                .filter(|(_, r)| r.frame == frame)
                .map(|(i, _)| i)
                .collect();
            if local.is_empty() {
                result.boxes.insert(frame, Vec::new());
                continue;
            }
            let frame_tokens = tape.gather_rows(encoded.o, &local);
            let (spos, sneg) = self.score_tokens(tape, store, frame_tokens, q_g);
            let noise_mat = noise.sample(local.len());
            let smask = contrastive_mask(
                tape,
                spos,
                sneg,
                cfg.gumbel_temperature,
                cfg.hard_selection,
                noise_mat.as_ref(),
            );
            let spos_vals = col_vec(tape, spos);
            let sneg_vals = col_vec(tape, sneg);
            let smask_vals = mask_rows(tape, smask);
            let sfiltered = filter_candidates(&spos_vals, &sneg_vals, &smask_vals, cfg.k2);
            let ssel = if class == 0 { &sfiltered.pos } else { &sfiltered.neg };
            let bypass_spatial = cfg.k2 >= local.len();

            let sel_local: Vec<usize> = ssel.ranked.iter().map(|&(i, _)| i).collect();
            let picked = tape.gather_rows(frame_tokens, &sel_local);
            let gated = if bypass_spatial || ssel.fallback {
                picked
            } else {
                let mask_col = tape.slice_cols(smask, class, class + 1);
                let gathered = tape.gather_rows(mask_col, &sel_local);
                tape.mul_col(picked, gathered)
            };
            token_feats_parts.push(gated);

            let mut scored = Vec::with_capacity(sel_local.len());
            for &(li, s) in &ssel.ranked {
                let r = encoded.tokens[local[li]];
                token_refs.push(r);
                let stored = if class == 0 { s } else { -s };
                scored.push(ScoredToken {
                    token: episode.ocr[r.frame][r.slot].clone(),
                    score: stored,
                });
            }
            result.boxes.insert(frame, scored);
        }
        // re-rank frame list scores for the fallback path invariant
        let _ = rank_scores;
        result.fallback = selection.fallback;

        let token_feats = if token_feats_parts.is_empty() {
            tape.constant(Mat::zeros((0, d)))
        } else {
            tape.concat_rows(&token_feats_parts)
        };
        Ok(SelectedBranch {
            frame_indices,
            frame_feats,
            token_feats,
            token_refs,
            result,
        })
    }
}

/// `softmax((X·Wa)·(q_g·Wb)ᵀ)` over the candidate axis → `T×1`.
fn score_pair(tape: &mut Tape, store: &ParamStore, x: Tx, q_g: Tx, wa: usize, wb: usize) -> Tx {
    let wa = store.on(tape, wa);
    let wb = store.on(tape, wb);
    let xf = tape.matmul(x, wa);
    let qf = tape.matmul(q_g, wb);
    let qt = tape.transpose(qf);
    let logits = tape.matmul(xf, qt);
    let row = tape.transpose(logits);
    let sm = tape.softmax_rows(row);
    tape.transpose(sm)
}

/// Per-candidate binary Gumbel-Softmax over `[pos; neg]`:
/// `softmax(scores/τ + g)` rows, emitted one-hot with straight-through
/// gradients under hard selection. With noise off and τ → 0 each row is
/// one-hot at `argmax([pos, neg])`.
pub fn contrastive_mask(
    tape: &mut Tape,
    pos: Tx,
    neg: Tx,
    temperature: f64,
    hard: bool,
    noise: Option<&Mat>,
) -> Tx {
    let pair = tape.concat_cols(&[pos, neg]);
    let mut logits = tape.scale(pair, 1.0 / temperature);
    if let Some(noise) = noise {
        let c = tape.constant(noise.clone());
        logits = tape.add(logits, c);
    }
    let soft = tape.softmax_rows(logits);
    if hard {
        tape.straight_through_onehot(soft)
    } else {
        soft
    }
}

fn col_vec(tape: &Tape, t: Tx) -> Vec<f64> {
    tape.value(t).column(0).to_vec()
}

fn mask_rows(tape: &Tape, t: Tx) -> Vec<[f64; 2]> {
    tape.value(t).rows().into_iter().map(|r| [r[0], r[1]]).collect()
}
