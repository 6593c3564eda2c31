//! Domain data model shared by every stage of the pipeline.
//!
//! All coordinates are normalized to `[0,1]` relative to the frame; pixel
//! inputs are converted at ingestion via [`BoundingBox::from_pixels`]. Values
//! are immutable after construction and safe to share across threads.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::CoreError;

/// Axis-aligned box with normalized top-left / bottom-right corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, CoreError> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// Convert pixel coordinates to normalized coordinates.
    pub fn from_pixels(
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        frame_w: f64,
        frame_h: f64,
    ) -> Result<Self, CoreError> {
        if frame_w <= 0.0 || frame_h <= 0.0 {
            return Err(CoreError::Validation(format!(
                "frame size must be positive, got {frame_w}x{frame_h}"
            )));
        }
        Self::new(x1 / frame_w, y1 / frame_h, x2 / frame_w, y2 / frame_h)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let ok = self.x1 <= self.x2
            && self.y1 <= self.y2
            && [self.x1, self.y1, self.x2, self.y2]
                .iter()
                .all(|v| (0.0..=1.0).contains(v) && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(CoreError::Validation(format!("invalid box {self:?}")))
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// One detected-and-recognized scene-text instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrToken {
    pub frame_index: usize,
    pub track_id: usize,
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl OcrToken {
    pub fn validate(&self, n_frames: usize) -> Result<(), CoreError> {
        if self.text.trim().is_empty() {
            return Err(CoreError::Validation(format!(
                "OCR token in frame {} has empty text",
                self.frame_index
            )));
        }
        if self.frame_index >= n_frames {
            return Err(CoreError::Validation(format!(
                "OCR token frame index {} outside episode length {}",
                self.frame_index, n_frames
            )));
        }
        self.bbox.validate()
    }
}

/// Spatio-temporal ground truth: inclusive frame segments plus one box per
/// annotated frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingAnnotation {
    /// Non-overlapping, sorted inclusive `(start_frame, end_frame)` ranges.
    pub segments: Vec<(usize, usize)>,
    /// At most one box per frame; every keyed frame lies inside some segment.
    pub boxes: BTreeMap<usize, BoundingBox>,
}

impl GroundingAnnotation {
    pub fn validate(&self) -> Result<(), CoreError> {
        let mut prev_end: Option<usize> = None;
        for &(start, end) in &self.segments {
            if start > end {
                return Err(CoreError::Validation(format!(
                    "segment ({start},{end}) has start > end"
                )));
            }
            if let Some(pe) = prev_end {
                if start <= pe {
                    return Err(CoreError::Validation(format!(
                        "segments overlap or are unsorted near frame {start}"
                    )));
                }
            }
            prev_end = Some(end);
        }
        for (&frame, bbox) in &self.boxes {
            if !self.contains_frame(frame) {
                return Err(CoreError::Validation(format!(
                    "box on frame {frame} lies outside all segments"
                )));
            }
            bbox.validate()?;
        }
        Ok(())
    }

    pub fn contains_frame(&self, frame: usize) -> bool {
        self.segments.iter().any(|&(s, e)| frame >= s && frame <= e)
    }

    pub fn max_frame(&self) -> Option<usize> {
        self.segments.iter().map(|&(_, e)| e).max()
    }
}

/// One QA instance: question, frame features, per-frame OCR tokens, answers,
/// and optional grounding ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub question: String,
    /// `T` raw visual feature vectors, one per frame.
    pub frames: Vec<Vec<f64>>,
    /// OCR tokens grouped by frame; `ocr.len() == frames.len()`.
    pub ocr: Vec<Vec<OcrToken>>,
    pub answers: Vec<String>,
    pub annotation: Option<GroundingAnnotation>,
}

impl Episode {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.answers.is_empty() {
            return Err(CoreError::Validation(format!(
                "episode {} has no ground-truth answers",
                self.id
            )));
        }
        if self.ocr.len() != self.frames.len() {
            return Err(CoreError::Validation(format!(
                "episode {}: ocr groups ({}) != frames ({})",
                self.id,
                self.ocr.len(),
                self.frames.len()
            )));
        }
        for (t, tokens) in self.ocr.iter().enumerate() {
            for tok in tokens {
                tok.validate(self.frames.len())?;
                if tok.frame_index != t {
                    return Err(CoreError::Validation(format!(
                        "episode {}: token in group {} claims frame {}",
                        self.id, t, tok.frame_index
                    )));
                }
            }
        }
        if let Some(ann) = &self.annotation {
            ann.validate()?;
            if let Some(max) = ann.max_frame() {
                if max >= self.frames.len() {
                    return Err(CoreError::Validation(format!(
                        "episode {}: annotation frame {} outside episode length {}",
                        self.id,
                        max,
                        self.frames.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Copy with the grounding annotation removed (weak-supervision guard).
    pub fn without_annotation(&self) -> Episode {
        let mut ep = self.clone();
        ep.annotation = None;
        ep
    }
}

/// A selected frame with its relevance score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub score: f64,
}

/// A selected OCR token with its selection score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    pub token: OcrToken,
    pub score: f64,
}

/// Ranked grounding output: selected frames, and ranked selected boxes within
/// each selected frame. One instance carries the positive sets; a parallel
/// instance carries the negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GroundingResult {
    /// Ranked selected frames (scores non-increasing), length ≤ K1.
    pub frames: Vec<FrameScore>,
    /// Per selected frame, ranked tokens (scores non-increasing), length ≤ K2.
    pub boxes: BTreeMap<usize, Vec<ScoredToken>>,
    /// Set when no frame carried the requested mask class and the global
    /// top-K fallback was used.
    pub fallback: bool,
}

impl GroundingResult {
    pub fn validate(&self, k1: usize, k2: usize) -> Result<(), CoreError> {
        if self.frames.len() > k1 {
            return Err(CoreError::Validation(format!(
                "grounding result has {} frames, limit {}",
                self.frames.len(),
                k1
            )));
        }
        for w in self.frames.windows(2) {
            if w[0].score < w[1].score {
                return Err(CoreError::Validation(
                    "frame scores must be non-increasing".into(),
                ));
            }
        }
        for (frame, toks) in &self.boxes {
            if toks.len() > k2 {
                return Err(CoreError::Validation(format!(
                    "frame {frame} has {} boxes, limit {k2}",
                    toks.len()
                )));
            }
            for w in toks.windows(2) {
                if w[0].score < w[1].score {
                    return Err(CoreError::Validation(format!(
                        "box scores in frame {frame} must be non-increasing"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total number of selected boxes across all selected frames.
    pub fn n_boxes(&self) -> usize {
        self.boxes.values().map(Vec::len).sum()
    }
}

/// Where an emitted answer word came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenSource {
    /// Fixed-vocabulary word id.
    Vocab(usize),
    /// Index into the decoder's OCR candidate list.
    Ocr(usize),
}

/// One emitted answer word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmittedToken {
    pub word: String,
    pub source: TokenSource,
}

/// Ordered decoder output plus per-step score vectors over
/// `[vocabulary; OCR candidates]`, the OCR block padded to a fixed width
/// with `-inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerDecoding {
    pub tokens: Vec<EmittedToken>,
    pub step_scores: Vec<Vec<f64>>,
}
