//! Annotation and prediction file I/O.
//!
//! Annotation schema (one file per split):
//!
//! ```json
//! {"episodes": [{"id": "...", "question": "...", "answers": ["..."],
//!                "segments": [[3, 7]],
//!                "boxes": {"3": [0.1, 0.1, 0.2, 0.2]}}]}
//! ```
//!
//! The prediction schema mirrors it with `pred_answer`, ranked `pred_frames`
//! (`[frame, score]` pairs) and `pred_boxes` (per-frame ranked
//! `[x1, y1, x2, y2, score]` records). Floats are written in serde_json's
//! shortest round-trip form, which reconstructs the exact f64 value.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::types::{BoundingBox, GroundingAnnotation, GroundingResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub episodes: Vec<AnnotatedEpisode>,
}

/// One annotated QA instance as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotatedEpisode {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub segments: Vec<(usize, usize)>,
    /// Frame index (as a string key) → `[x1, y1, x2, y2]`.
    pub boxes: BTreeMap<String, [f64; 4]>,
}

impl AnnotatedEpisode {
    pub fn annotation(&self) -> Result<GroundingAnnotation> {
        let mut boxes = BTreeMap::new();
        for (key, arr) in &self.boxes {
            let frame: usize = key.parse().map_err(|_| {
                CoreError::Validation(format!(
                    "episode {}: box key {key:?} is not a frame index",
                    self.id
                ))
            })?;
            let bbox = BoundingBox::new(arr[0], arr[1], arr[2], arr[3]).map_err(|e| {
                CoreError::Validation(format!("episode {}: frame {frame}: {e}", self.id))
            })?;
            boxes.insert(frame, bbox);
        }
        let ann = GroundingAnnotation { segments: self.segments.clone(), boxes };
        ann.validate()
            .map_err(|e| CoreError::Validation(format!("episode {}: {e}", self.id)))?;
        Ok(ann)
    }

    pub fn from_annotation(
        id: &str,
        question: &str,
        answers: &[String],
        ann: &GroundingAnnotation,
    ) -> Self {
        Self {
            id: id.to_string(),
            question: question.to_string(),
            answers: answers.to_vec(),
            segments: ann.segments.clone(),
            boxes: ann
                .boxes
                .iter()
                .map(|(f, b)| (f.to_string(), b.as_array()))
                .collect(),
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::parse(path.display().to_string(), e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::parse(path.display().to_string(), e.to_string()))?;
    fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
}

pub fn load_annotation_file(path: &Path) -> Result<AnnotationFile> {
    let file: AnnotationFile = read_json(path)?;
    for ep in &file.episodes {
        ep.annotation()?; // full validation before handing anything back
    }
    Ok(file)
}

/// Load the annotation file and return validated annotations keyed by
/// episode id. Never returns values violating the annotation invariants.
pub fn load_annotations(path: &Path) -> Result<BTreeMap<String, GroundingAnnotation>> {
    let file = load_annotation_file(path)?;
    let mut out = BTreeMap::new();
    for ep in &file.episodes {
        if out.insert(ep.id.clone(), ep.annotation()?).is_some() {
            return Err(CoreError::parse(
                path.display().to_string(),
                format!("duplicate episode id {:?}", ep.id),
            ));
        }
    }
    Ok(out)
}

pub fn save_annotation_file(path: &Path, file: &AnnotationFile) -> Result<()> {
    write_json(path, file)
}

/// One prediction as stored on disk: the textual answer plus the ranked
/// grounded frames and boxes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Prediction {
    pub pred_answer: String,
    /// Ranked `[frame, score]` pairs, scores non-increasing.
    pub pred_frames: Vec<(usize, f64)>,
    /// Frame index (string key) → ranked `[x1, y1, x2, y2, score]` records.
    pub pred_boxes: BTreeMap<String, Vec<[f64; 5]>>,
}

impl Prediction {
    pub fn from_result(answer: &str, res: &GroundingResult) -> Self {
        Self {
            pred_answer: answer.to_string(),
            pred_frames: res.frames.iter().map(|f| (f.frame, f.score)).collect(),
            pred_boxes: res
                .boxes
                .iter()
                .map(|(frame, toks)| {
                    let rows = toks
                        .iter()
                        .map(|st| {
                            let b = st.token.bbox;
                            [b.x1, b.y1, b.x2, b.y2, st.score]
                        })
                        .collect();
                    (frame.to_string(), rows)
                })
                .collect(),
        }
    }

    /// Ranked boxes of the top-`k_t` frames, `k_s` boxes per frame.
    pub fn top_boxes(&self, k_t: usize, k_s: usize) -> Vec<(usize, Vec<(BoundingBox, f64)>)> {
        let mut out = Vec::new();
        for &(frame, _) in self.pred_frames.iter().take(k_t) {
            let rows = self
                .pred_boxes
                .get(&frame.to_string())
                .map(|rows| {
                    rows.iter()
                        .take(k_s)
                        .map(|r| {
                            (BoundingBox { x1: r[0], y1: r[1], x2: r[2], y2: r[3] }, r[4])
                        })
                        .collect()
                })
                .unwrap_or_default();
            out.push((frame, rows));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionFile {
    episodes: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionRecord {
    id: String,
    #[serde(flatten)]
    prediction: Prediction,
}

/// Write predictions in the documented schema, ranked order preserved.
pub fn save_predictions(
    results: &BTreeMap<String, (String, GroundingResult)>,
    path: &Path,
) -> Result<()> {
    for (id, (_, res)) in results {
        res.validate(usize::MAX, usize::MAX)
            .map_err(|e| CoreError::Validation(format!("episode {id}: {e}")))?;
    }
    let file = PredictionFile {
        episodes: results
            .iter()
            .map(|(id, (answer, res))| PredictionRecord {
                id: id.clone(),
                prediction: Prediction::from_result(answer, res),
            })
            .collect(),
    };
    write_json(path, &file)
}

pub fn load_predictions(path: &Path) -> Result<BTreeMap<String, Prediction>> {
    let file: PredictionFile = read_json(path)?;
    let mut out = BTreeMap::new();
    for rec in file.episodes {
        for w in rec.prediction.pred_frames.windows(2) {
            if w[0].1 < w[1].1 {
                return Err(CoreError::parse(
                    path.display().to_string(),
                    format!("episode {}: pred_frames not ranked", rec.id),
                ));
            }
        }
        if out.insert(rec.id.clone(), rec.prediction).is_some() {
            return Err(CoreError::parse(
                path.display().to_string(),
                format!("duplicate episode id {:?}", rec.id),
            ));
        }
    }
    Ok(out)
}
