//! Grounded scene-text video question answering, desk scale.
//!
//! Given a question and a stream of frames carrying OCR tokens, the pipeline
//! selects question-relevant frames, then question-relevant scene-text boxes
//! within them, decodes a textual answer from the grounded tokens, and scores
//! both the answer and the grounding against spatio-temporal annotations.

pub mod decode;
pub mod encode;
pub mod error;
pub mod ground;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod params;
pub mod phoc;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
pub mod transformer;
pub mod types;

pub use error::{CoreError, Result};
pub use types::{
    AnswerDecoding, BoundingBox, EmittedToken, Episode, FrameScore, GroundingAnnotation,
    GroundingResult, OcrToken, ScoredToken, TokenSource,
};
