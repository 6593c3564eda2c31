//! Full model: encoder → temporal-to-spatial grounding → three decoder
//! branches (anchor / positive / negative) with the combined objective, plus
//! the deterministic inference path.
//!
//! Inference never reads an episode's grounding annotation; annotations are
//! consumed by metrics and the target builder only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{build_targets, render_answer, DecodeInputs, Decoder, DecoderConfig, Vocab};
use crate::encode::{Encoded, Encoder, EncoderConfig};
use crate::error::{CoreError, Result};
use crate::ground::{GroundOutcome, Grounder, GroundingConfig, Noise, SelectionScores};
use crate::objective::{answer_repr, bce_loss, contrastive_loss, total_loss, LossConfig};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tx};
use crate::types::{AnswerDecoding, Episode, GroundingResult};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub grounding: GroundingConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.grounding.validate()?;
        self.decoder.validate()?;
        self.loss.validate()?;
        if self.decoder.d != self.encoder.d {
            return Err(CoreError::Config(format!(
                "decoder width {} != encoder width {}",
                self.decoder.d, self.encoder.d
            )));
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub grounder: Grounder,
    pub decoder: Decoder,
    pub vocab: Vocab,
    pub store: ParamStore,
}

/// Scalar loss components of one training forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub cons: f64,
    /// Ground-truth word matched neither vocabulary nor selected candidates.
    pub unanswerable: bool,
}

/// Inference output for one episode.
#[derive(Debug, Clone)]
pub struct PredictOutput {
    pub answer: String,
    pub decoding: AnswerDecoding,
    /// Positive (grounded) result — the prediction.
    pub grounding: GroundingResult,
    /// Negative branch, for inspection.
    pub anti_grounding: GroundingResult,
    pub temporal: SelectionScores,
}

impl Model {
    /// Build a model with freshly initialized parameters. The decoder's
    /// `vocab_size` of 0 means "take it from the vocabulary"; any other
    /// value must match.
    pub fn new(mut cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if cfg.decoder.vocab_size == 0 {
            cfg.decoder.vocab_size = vocab.len();
        }
        if cfg.decoder.vocab_size != vocab.len() {
            return Err(CoreError::Config(format!(
                "decoder vocab_size {} != vocabulary length {}",
                cfg.decoder.vocab_size,
                vocab.len()
            )));
        }
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let encoder = Encoder::new(cfg.encoder.clone(), &mut store)?;
        let grounder = Grounder::new(cfg.encoder.d, &mut store);
        let decoder = Decoder::new(cfg.decoder.clone(), &mut store)?;
        Ok(Self { cfg, encoder, grounder, decoder, vocab, store })
    }

    fn encode_and_ground(
        &self,
        tape: &mut Tape,
        ep: &Episode,
        noise: &mut Noise,
    ) -> Result<(Encoded, Tx, GroundOutcome)> {
        ep.validate()?;
        let encoded = self.encoder.encode_episode(tape, &self.store, ep)?;
        let q_g = self
            .encoder
            .pool_question(tape, &self.store, encoded.q, &encoded.q_mask)?;
        let outcome = self.grounder.ground(
            tape,
            &self.store,
            &encoded,
            ep,
            q_g,
            &self.cfg.grounding,
            noise,
        )?;
        Ok((encoded, q_g, outcome))
    }

    fn candidate_words(&self, ep: &Episode, refs: &[crate::encode::TokenRef]) -> Vec<String> {
        refs.iter().map(|r| ep.ocr[r.frame][r.slot].text.clone()).collect()
    }

    /// One training forward pass; returns the loss node and its parts.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        ep: &Episode,
        noise_seed: u64,
    ) -> Result<(Tx, LossParts)> {
        let mut noise = Noise::Stream(ChaCha8Rng::seed_from_u64(noise_seed));
        let (encoded, _q_g, outcome) = self.encode_and_ground(tape, ep, &mut noise)?;
        let k1k2 = self.cfg.grounding.k1 * self.cfg.grounding.k2;
        // the anchor branch points over every token, so representations pad
        // to the widest candidate block of the episode
        let pad_width = k1k2.max(encoded.tokens.len());

        let pos_words = self.candidate_words(ep, &outcome.pos.token_refs);
        let targets = build_targets(
            &ep.answers,
            &self.vocab,
            &pos_words,
            self.cfg.decoder.steps,
            pad_width,
        );
        let pos_inputs = DecodeInputs {
            q: encoded.q,
            q_mask: &encoded.q_mask,
            f_sel: outcome.pos.frame_feats,
            o_sel: outcome.pos.token_feats,
            ocr_words: &pos_words,
        };
        let pos_fwd = self.decoder.decode_tf(tape, &self.store, &pos_inputs, &targets.teacher)?;
        let mut bce = bce_loss(tape, pos_fwd.voc_logits, pos_fwd.ocr_logits, &targets)?;

        let contrastive = if self.cfg.loss.lambda != 0.0 {
            // teacher feedback indices point into a branch's own candidate
            // list, so each branch gets targets built against its candidates
            let anchor_words = self.candidate_words(ep, &encoded.tokens);
            let anchor_targets = build_targets(
                &ep.answers,
                &self.vocab,
                &anchor_words,
                self.cfg.decoder.steps,
                pad_width,
            );
            let anchor_inputs = DecodeInputs {
                q: encoded.q,
                q_mask: &encoded.q_mask,
                f_sel: encoded.f,
                o_sel: encoded.o,
                ocr_words: &anchor_words,
            };
            let anchor_fwd =
                self.decoder
                    .decode_tf(tape, &self.store, &anchor_inputs, &anchor_targets.teacher)?;

            let neg_words = self.candidate_words(ep, &outcome.neg.token_refs);
            let neg_targets = build_targets(
                &ep.answers,
                &self.vocab,
                &neg_words,
                self.cfg.decoder.steps,
                pad_width,
            );
            let neg_inputs = DecodeInputs {
                q: encoded.q,
                q_mask: &encoded.q_mask,
                f_sel: outcome.neg.frame_feats,
                o_sel: outcome.neg.token_feats,
                ocr_words: &neg_words,
            };
            let neg_fwd =
                self.decoder.decode_tf(tape, &self.store, &neg_inputs, &neg_targets.teacher)?;

            if self.cfg.loss.anchor_bce {
                let anchor_bce =
                    bce_loss(tape, anchor_fwd.voc_logits, anchor_fwd.ocr_logits, &anchor_targets)?;
                bce = tape.add(bce, anchor_bce);
            }

            let y_pos = answer_repr(tape, pos_fwd.voc_logits, pos_fwd.ocr_logits, pad_width);
            let y_anchor =
                answer_repr(tape, anchor_fwd.voc_logits, anchor_fwd.ocr_logits, pad_width);
            let y_neg = answer_repr(tape, neg_fwd.voc_logits, neg_fwd.ocr_logits, pad_width);
            Some(contrastive_loss(tape, y_pos, y_anchor, y_neg, self.cfg.loss.tau)?)
        } else {
            None
        };

        let total = total_loss(tape, bce, contrastive, self.cfg.loss.lambda);
        let parts = LossParts {
            total: tape.scalar(total),
            bce: tape.scalar(bce),
            cons: contrastive.map(|c| tape.scalar(c)).unwrap_or(0.0),
            unanswerable: targets.unanswerable,
        };
        Ok((total, parts))
    }

    /// Deterministic inference: Gumbel noise off, hard argmax routing, greedy
    /// decoding over the grounded inputs. Never reads `ep.annotation`.
    pub fn predict(&self, ep: &Episode) -> Result<PredictOutput> {
        let mut tape = Tape::new();
        let mut noise = Noise::Off;
        let (encoded, _q_g, outcome) = self.encode_and_ground(&mut tape, ep, &mut noise)?;
        let pos_words = self.candidate_words(ep, &outcome.pos.token_refs);
        let inputs = DecodeInputs {
            q: encoded.q,
            q_mask: &encoded.q_mask,
            f_sel: outcome.pos.frame_feats,
            o_sel: outcome.pos.token_feats,
            ocr_words: &pos_words,
        };
        let k1k2 = self.cfg.grounding.k1 * self.cfg.grounding.k2;
        let decoding =
            self.decoder
                .decode_greedy(&mut tape, &self.store, &inputs, &self.vocab, k1k2)?;
        Ok(PredictOutput {
            answer: render_answer(&decoding),
            decoding,
            grounding: outcome.pos.result,
            anti_grounding: outcome.neg.result,
            temporal: outcome.temporal,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::synth::{generate_episode, SynthConfig, World};

    pub(crate) fn tiny_model_cfg(d: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d,
                visual_dim: 12,
                id_embed_dim: 8,
                max_question_len: 8,
                joint_layers: 1,
                heads: 2,
                ffn_mult: 2,
                max_frames: 32,
                max_tracks: 32,
                question_buckets: 64,
                word_buckets: 128,
                max_seq: 512,
                ..EncoderConfig::default()
            },
            grounding: GroundingConfig { k1: 2, k2: 2, ..GroundingConfig::default() },
            decoder: DecoderConfig { layers: 1, steps: 4, vocab_size: 0, d, heads: 2 },
            loss: LossConfig::default(),
        }
    }

    fn tiny_synth_cfg() -> SynthConfig {
        SynthConfig {
            t: 8,
            s: 4,
            visual_dim: 12,
            distractors_per_frame: 2,
            n_pairs: 4,
            n_distractor_words: 8,
            ..SynthConfig::default()
        }
    }

    fn tiny_model() -> (Model, Episode) {
        let scfg = tiny_synth_cfg();
        let world = World::build(&scfg);
        let vocab = Vocab::from_content_words(world.vocab_words());
        let model = Model::new(tiny_model_cfg(16), vocab, 7).unwrap();
        let (ep, _) = generate_episode(&scfg, 3, "ep0").unwrap();
        (model, ep)
    }

    #[test]
    fn train_forward_produces_finite_losses() {
        let (model, ep) = tiny_model();
        let mut tape = Tape::new();
        let (_, parts) = model.forward_train(&mut tape, &ep, 11).unwrap();
        assert!(parts.total.is_finite());
        assert!(parts.bce > 0.0);
        assert!(parts.cons >= 0.0);
        assert!((parts.total - (parts.bce + model.cfg.loss.lambda * parts.cons)).abs() < 1e-9);
    }

    #[test]
    fn lambda_zero_skips_contrastive() {
        let (mut model, ep) = tiny_model();
        model.cfg.loss.lambda = 0.0;
        let mut tape = Tape::new();
        let (_, parts) = model.forward_train(&mut tape, &ep, 11).unwrap();
        assert_eq!(parts.cons, 0.0);
        assert_eq!(parts.total, parts.bce);
    }

    #[test]
    fn predictions_ignore_annotations_bitwise() {
        let (model, ep) = tiny_model();
        let with = model.predict(&ep).unwrap();
        let without = model.predict(&ep.without_annotation()).unwrap();
        assert_eq!(with.answer, without.answer);
        assert_eq!(with.decoding.step_scores, without.decoding.step_scores);
        assert_eq!(with.grounding, without.grounding);
        assert_eq!(with.temporal, without.temporal);
    }

    #[test]
    fn predict_is_deterministic_and_respects_limits() {
        let (model, ep) = tiny_model();
        let a = model.predict(&ep).unwrap();
        let b = model.predict(&ep).unwrap();
        assert_eq!(a.answer, b.answer);
        assert_eq!(a.decoding.step_scores, b.decoding.step_scores);
        let k1 = model.cfg.grounding.k1;
        let k2 = model.cfg.grounding.k2;
        a.grounding.validate(k1, k2).unwrap();
        assert!(a.grounding.n_boxes() <= k1 * k2);
    }

    #[test]
    fn grounding_disabled_covers_everything() {
        let (mut model, ep) = tiny_model();
        model.cfg.grounding.k1 = ep.n_frames();
        model.cfg.grounding.k2 = 4;
        let out = model.predict(&ep).unwrap();
        assert_eq!(out.grounding.frames.len(), ep.n_frames());
        let total_tokens: usize = ep.ocr.iter().map(Vec::len).sum();
        assert_eq!(out.grounding.n_boxes(), total_tokens);
    }

    #[test]
    fn empty_ocr_episode_is_answerable_by_vocab_only() {
        let (model, mut ep) = tiny_model();
        for g in ep.ocr.iter_mut() {
            g.clear();
        }
        let out = model.predict(&ep).unwrap();
        assert!(out.grounding.n_boxes() == 0);
        assert!(out
            .decoding
            .tokens
            .iter()
            .all(|t| matches!(t.source, crate::types::TokenSource::Vocab(_))));
    }

    #[test]
    fn empty_question_is_rejected() {
        let (model, mut ep) = tiny_model();
        ep.question = "??".into();
        assert!(model.predict(&ep).is_err());
    }
}
