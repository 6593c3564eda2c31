//! Question, frame, and OCR-token representations plus joint contextualization.
//!
//! Frame: `f_t = LN(W1·visual_t + W2·temb(t))`.
//! OCR token: `o = LN(W3·word + W4·phoc + W5·temb(t) + W6·tremb(track)) +
//! LN(W7·box)`, with an independent affine on the box term.
//! The three streams are then jointly contextualized by a transformer over
//! `[Q; F; O]` with question-padding masks; with zero layers the mapping is
//! the identity.
//!
//! The toy question/word embeddings are hash-bucketed trainable tables;
//! pretrained vectors can be dropped in through the provider interface, whose
//! declared width is checked at registration.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::{fnv1a, Init, ParamStore};
use crate::phoc::{phoc_encode, PHOC_DIM};
use crate::tensor::{Mat, Tape, Tx, MASK_NEG};
use crate::text::tokenize;
use crate::transformer::{self, LayerSlots};
use crate::types::{Episode, OcrToken};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EncoderConfig {
    /// Common hidden width `d`.
    pub d: usize,
    pub visual_dim: usize,
    pub fasttext_dim: usize,
    /// Fixed by the PHOC layout.
    pub phoc_dim: usize,
    pub id_embed_dim: usize,
    /// Maximum question length `L`.
    pub max_question_len: usize,
    pub joint_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Temporal-id table size (upper bound on frame index).
    pub max_frames: usize,
    /// Track-id table size (upper bound on track id).
    pub max_tracks: usize,
    pub question_buckets: usize,
    pub word_buckets: usize,
    /// Cap on the joint sequence length `L + T + #tokens`.
    pub max_seq: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 768,
            visual_dim: 1024,
            fasttext_dim: 300,
            phoc_dim: PHOC_DIM,
            id_embed_dim: 50,
            max_question_len: 20,
            joint_layers: 2,
            heads: 8,
            ffn_mult: 4,
            max_frames: 128,
            max_tracks: 256,
            question_buckets: 2048,
            word_buckets: 4096,
            max_seq: 1600,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d,
            self.visual_dim,
            self.fasttext_dim,
            self.id_embed_dim,
            self.max_question_len,
            self.heads,
            self.ffn_mult,
            self.max_frames,
            self.max_tracks,
            self.question_buckets,
            self.word_buckets,
            self.max_seq,
        ];
        if dims.iter().any(|&v| v == 0) {
            return Err(CoreError::Config("encoder dimensions must be positive".into()));
        }
        if self.phoc_dim != PHOC_DIM {
            return Err(CoreError::Config(format!(
                "phoc_dim must be {PHOC_DIM}, got {}",
                self.phoc_dim
            )));
        }
        if self.d % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "hidden width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Drop-in pretrained token embedding: `token → fixed-width vector`.
pub trait TokenVectorProvider: Send + Sync {
    fn width(&self) -> usize;
    fn vector(&self, token: &str) -> Vec<f64>;
}

/// Drop-in pretrained frame embedding: `(episode, frame, raw) → vector`.
pub trait FrameVectorProvider: Send + Sync {
    fn width(&self) -> usize;
    fn vector(&self, episode_id: &str, frame: usize, raw: &[f64]) -> Vec<f64>;
}

/// Position of a flattened OCR token: `episode.ocr[frame][slot]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenRef {
    pub frame: usize,
    pub slot: usize,
}

/// Jointly encoded episode: tape handles for the three streams plus masks
/// and the flattened token index.
pub struct Encoded {
    pub q: Tx,
    pub q_mask: Vec<bool>,
    pub f: Tx,
    /// `#tokens × d`; zero rows when the episode has no OCR.
    pub o: Tx,
    pub tokens: Vec<TokenRef>,
}

struct EncoderSlots {
    w_vis: usize,
    w_frame_te: usize,
    ln_f_g: usize,
    ln_f_b: usize,
    temb: usize,
    tremb: usize,
    w_word: usize,
    w_phoc: usize,
    w_ocr_te: usize,
    w_ocr_ta: usize,
    ln_o_g: usize,
    ln_o_b: usize,
    w_box: usize,
    ln_box_g: usize,
    ln_box_b: usize,
    q_table: usize,
    word_table: usize,
    w_pool: usize,
    joint: Vec<LayerSlots>,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    slots: EncoderSlots,
    question_provider: Option<Box<dyn TokenVectorProvider>>,
    word_provider: Option<Box<dyn TokenVectorProvider>>,
    visual_provider: Option<Box<dyn FrameVectorProvider>>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let slots = EncoderSlots {
            w_vis: store.register("enc.w_vis", cfg.visual_dim, d, Init::Xavier),
            w_frame_te: store.register("enc.w_frame_te", cfg.id_embed_dim, d, Init::Xavier),
            ln_f_g: store.register("enc.ln_f.g", 1, d, Init::Ones),
            ln_f_b: store.register("enc.ln_f.b", 1, d, Init::Zeros),
            temb: store.register("enc.temb", cfg.max_frames, cfg.id_embed_dim, Init::Normal(0.02)),
            tremb: store.register("enc.tremb", cfg.max_tracks, cfg.id_embed_dim, Init::Normal(0.02)),
            w_word: store.register("enc.w_word", cfg.fasttext_dim, d, Init::Xavier),
            w_phoc: store.register("enc.w_phoc", cfg.phoc_dim, d, Init::Xavier),
            w_ocr_te: store.register("enc.w_ocr_te", cfg.id_embed_dim, d, Init::Xavier),
            w_ocr_ta: store.register("enc.w_ocr_ta", cfg.id_embed_dim, d, Init::Xavier),
            ln_o_g: store.register("enc.ln_o.g", 1, d, Init::Ones),
            ln_o_b: store.register("enc.ln_o.b", 1, d, Init::Zeros),
            w_box: store.register("enc.w_box", 4, d, Init::Xavier),
            ln_box_g: store.register("enc.ln_box.g", 1, d, Init::Ones),
            ln_box_b: store.register("enc.ln_box.b", 1, d, Init::Zeros),
            q_table: store.register("enc.q_table", cfg.question_buckets, d, Init::Normal(0.02)),
            word_table: store.register(
                "enc.word_table",
                cfg.word_buckets,
                cfg.fasttext_dim,
                Init::Normal(0.02),
            ),
            w_pool: store.register("enc.w_pool", d, 1, Init::Xavier),
            joint: transformer::register_stack(store, "enc.joint", cfg.joint_layers, d, cfg.ffn_mult),
        };
        Ok(Self {
            cfg,
            slots,
            question_provider: None,
            word_provider: None,
            visual_provider: None,
        })
    }

    pub fn register_question_provider(
        &mut self,
        provider: Box<dyn TokenVectorProvider>,
    ) -> Result<()> {
        if provider.width() != self.cfg.d {
            return Err(CoreError::Config(format!(
                "question provider width {} != d {}",
                provider.width(),
                self.cfg.d
            )));
        }
        self.question_provider = Some(provider);
        Ok(())
    }

    pub fn register_word_provider(
        &mut self,
        provider: Box<dyn TokenVectorProvider>,
    ) -> Result<()> {
        if provider.width() != self.cfg.fasttext_dim {
            return Err(CoreError::Config(format!(
                "word provider width {} != fasttext_dim {}",
                provider.width(),
                self.cfg.fasttext_dim
            )));
        }
        self.word_provider = Some(provider);
        Ok(())
    }

    pub fn register_visual_provider(
        &mut self,
        provider: Box<dyn FrameVectorProvider>,
    ) -> Result<()> {
        if provider.width() != self.cfg.visual_dim {
            return Err(CoreError::Config(format!(
                "visual provider width {} != visual_dim {}",
                provider.width(),
                self.cfg.visual_dim
            )));
        }
        self.visual_provider = Some(provider);
        Ok(())
    }

    /// Hash bucket for a lowercased token; the empty string pins bucket 0.
    pub fn word_bucket(&self, token: &str) -> usize {
        bucket(token, self.cfg.word_buckets)
    }

    /// 300-wide word vector (provider, or the trainable hash-bucketed table).
    pub fn word_vec(&self, store: &ParamStore, token: &str) -> Vec<f64> {
        if let Some(p) = &self.word_provider {
            return p.vector(token);
        }
        let row = self.word_bucket(token);
        store.value(self.slots.word_table).row(row).to_vec()
    }

    fn word_vec_tx(&self, tape: &mut Tape, store: &ParamStore, token: &str) -> Tx {
        if let Some(p) = &self.word_provider {
            let v = p.vector(token);
            let m = Mat::from_shape_vec((1, v.len()), v).expect("provider vector");
            tape.constant(m)
        } else {
            let table = store.on(tape, self.slots.word_table);
            tape.gather_rows(table, &[self.word_bucket(token)])
        }
    }

    /// `L×d` question matrix plus a validity mask; rows beyond the question
    /// (or all rows, for an empty question) are exact zeros.
    pub fn embed_question(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: &str,
    ) -> (Tx, Vec<bool>) {
        let l = self.cfg.max_question_len;
        let tokens = tokenize(text);
        let n = tokens.len().min(l);
        let mut mask = vec![false; l];
        for m in mask.iter_mut().take(n) {
            *m = true;
        }
        if n == 0 {
            return (tape.constant(Mat::zeros((l, self.cfg.d))), mask);
        }
        let rows = if let Some(p) = &self.question_provider {
            let mut m = Mat::zeros((n, self.cfg.d));
            for (i, tok) in tokens.iter().take(n).enumerate() {
                let v = p.vector(tok);
                m.row_mut(i).assign(&ndarray::ArrayView::from(&v[..]));
            }
            tape.constant(m)
        } else {
            let idx: Vec<usize> = tokens
                .iter()
                .take(n)
                .map(|t| bucket(t, self.cfg.question_buckets))
                .collect();
            let table = store.on(tape, self.slots.q_table);
            tape.gather_rows(table, &idx)
        };
        if n == l {
            (rows, mask)
        } else {
            let pad = tape.constant(Mat::zeros((l - n, self.cfg.d)));
            (tape.concat_rows(&[rows, pad]), mask)
        }
    }

    /// Embed one frame feature at temporal position `t`.
    pub fn embed_frame(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        visual: &[f64],
        t: usize,
    ) -> Result<Tx> {
        if visual.len() != self.cfg.visual_dim {
            return Err(CoreError::Validation(format!(
                "visual feature width {} != configured {}",
                visual.len(),
                self.cfg.visual_dim
            )));
        }
        if t >= self.cfg.max_frames {
            return Err(CoreError::Validation(format!(
                "frame index {t} exceeds temporal table size {}",
                self.cfg.max_frames
            )));
        }
        let x = tape.constant(Mat::from_shape_vec((1, visual.len()), visual.to_vec()).unwrap());
        self.frames_from_visuals(tape, store, x, &[t])
    }

    /// Embed all frames of an episode → `T×d`.
    pub fn embed_frames(&self, tape: &mut Tape, store: &ParamStore, ep: &Episode) -> Result<Tx> {
        let t_len = ep.n_frames();
        if t_len == 0 {
            return Err(CoreError::Validation(format!("episode {} has no frames", ep.id)));
        }
        if t_len > self.cfg.max_frames {
            return Err(CoreError::Validation(format!(
                "episode {} has {} frames, temporal table holds {}",
                ep.id, t_len, self.cfg.max_frames
            )));
        }
        let mut vis = Mat::zeros((t_len, self.cfg.visual_dim));
        for (t, raw) in ep.frames.iter().enumerate() {
            let row: Vec<f64> = match &self.visual_provider {
                Some(p) => p.vector(&ep.id, t, raw),
                None => raw.clone(),
            };
            if row.len() != self.cfg.visual_dim {
                return Err(CoreError::Validation(format!(
                    "episode {} frame {t}: feature width {} != configured {}",
                    ep.id,
                    row.len(),
                    self.cfg.visual_dim
                )));
            }
            vis.row_mut(t).assign(&ndarray::ArrayView::from(&row[..]));
        }
        let x = tape.constant(vis);
        let idx: Vec<usize> = (0..t_len).collect();
        self.frames_from_visuals(tape, store, x, &idx)
    }

    fn frames_from_visuals(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        visuals: Tx,
        t_idx: &[usize],
    ) -> Result<Tx> {
        let w1 = store.on(tape, self.slots.w_vis);
        let a = tape.matmul(visuals, w1);
        let temb = store.on(tape, self.slots.temb);
        let te = tape.gather_rows(temb, t_idx);
        let w2 = store.on(tape, self.slots.w_frame_te);
        let b = tape.matmul(te, w2);
        let sum = tape.add(a, b);
        let g = store.on(tape, self.slots.ln_f_g);
        let bt = store.on(tape, self.slots.ln_f_b);
        Ok(tape.layer_norm(sum, g, bt))
    }

    /// Embed a single OCR token (five feature groups, two layer norms).
    pub fn embed_ocr(&self, tape: &mut Tape, store: &ParamStore, tok: &OcrToken) -> Result<Tx> {
        let wv = self.word_vec_tx(tape, store, &tok.text);
        self.ocr_from_parts(
            tape,
            store,
            wv,
            &[tok.clone()],
        )
    }

    /// Embed every OCR token of the episode in frame-major order.
    pub fn embed_ocr_flat(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ep: &Episode,
    ) -> Result<(Tx, Vec<TokenRef>)> {
        let mut refs = Vec::new();
        let mut toks = Vec::new();
        for (frame, group) in ep.ocr.iter().enumerate() {
            for (slot, tok) in group.iter().enumerate() {
                refs.push(TokenRef { frame, slot });
                toks.push(tok.clone());
            }
        }
        if toks.is_empty() {
            return Ok((tape.constant(Mat::zeros((0, self.cfg.d))), refs));
        }
        let wv = if let Some(p) = &self.word_provider {
            let mut m = Mat::zeros((toks.len(), self.cfg.fasttext_dim));
            for (i, tok) in toks.iter().enumerate() {
                let v = p.vector(&tok.text);
                m.row_mut(i).assign(&ndarray::ArrayView::from(&v[..]));
            }
            tape.constant(m)
        } else {
            let idx: Vec<usize> = toks.iter().map(|t| self.word_bucket(&t.text)).collect();
            let table = store.on(tape, self.slots.word_table);
            tape.gather_rows(table, &idx)
        };
        let o = self.ocr_from_parts(tape, store, wv, &toks)?;
        Ok((o, refs))
    }

    fn ocr_from_parts(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        word_vecs: Tx,
        toks: &[OcrToken],
    ) -> Result<Tx> {
        let n = toks.len();
        let mut phoc = Mat::zeros((n, self.cfg.phoc_dim));
        let mut boxes = Mat::zeros((n, 4));
        let mut t_idx = Vec::with_capacity(n);
        let mut a_idx = Vec::with_capacity(n);
        for (i, tok) in toks.iter().enumerate() {
            if tok.frame_index >= self.cfg.max_frames {
                return Err(CoreError::Validation(format!(
                    "token frame index {} exceeds temporal table size {}",
                    tok.frame_index, self.cfg.max_frames
                )));
            }
            if tok.track_id >= self.cfg.max_tracks {
                return Err(CoreError::Validation(format!(
                    "track id {} exceeds track table size {}",
                    tok.track_id, self.cfg.max_tracks
                )));
            }
            phoc.row_mut(i)
                .assign(&ndarray::ArrayView::from(&phoc_encode(&tok.text)[..]));
            boxes.row_mut(i).assign(&ndarray::ArrayView::from(&tok.bbox.as_array()[..]));
            t_idx.push(tok.frame_index);
            a_idx.push(tok.track_id);
        }

        let w3 = store.on(tape, self.slots.w_word);
        let term_word = tape.matmul(word_vecs, w3);
        let phoc_c = tape.constant(phoc);
        let w4 = store.on(tape, self.slots.w_phoc);
        let term_phoc = tape.matmul(phoc_c, w4);
        let temb = store.on(tape, self.slots.temb);
        let te = tape.gather_rows(temb, &t_idx);
        let w5 = store.on(tape, self.slots.w_ocr_te);
        let term_te = tape.matmul(te, w5);
        let tremb = store.on(tape, self.slots.tremb);
        let ta = tape.gather_rows(tremb, &a_idx);
        let w6 = store.on(tape, self.slots.w_ocr_ta);
        let term_ta = tape.matmul(ta, w6);

        let s = tape.add(term_word, term_phoc);
        let s = tape.add(s, term_te);
        let s = tape.add(s, term_ta);
        let g = store.on(tape, self.slots.ln_o_g);
        let b = store.on(tape, self.slots.ln_o_b);
        let main = tape.layer_norm(s, g, b);

        let box_c = tape.constant(boxes);
        let w7 = store.on(tape, self.slots.w_box);
        let bterm = tape.matmul(box_c, w7);
        let bg = store.on(tape, self.slots.ln_box_g);
        let bb = store.on(tape, self.slots.ln_box_b);
        let box_ln = tape.layer_norm(bterm, bg, bb);

        Ok(tape.add(main, box_ln))
    }

    /// Joint contextualization over `[Q; F; O]` with question-padding masks.
    /// Returns the re-split streams; masked question rows are exact zeros.
    pub fn joint_encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Tx,
        q_mask: &[bool],
        f: Tx,
        o: Tx,
    ) -> Result<(Tx, Tx, Tx)> {
        let (l, d) = tape.shape(q);
        let (t_len, _) = tape.shape(f);
        let (n_tok, _) = tape.shape(o);
        assert_eq!(q_mask.len(), l, "question mask length");
        let n = l + t_len + n_tok;
        if n > self.cfg.max_seq {
            return Err(CoreError::Validation(format!(
                "joint sequence length {n} exceeds configured maximum {}",
                self.cfg.max_seq
            )));
        }
        if self.cfg.joint_layers == 0 {
            return Ok((q, f, o));
        }
        let parts = if n_tok > 0 { vec![q, f, o] } else { vec![q, f] };
        let mut x = tape.concat_rows(&parts);

        let mut valid = vec![true; n];
        valid[..l].copy_from_slice(q_mask);
        let mask = if q_mask.iter().all(|&m| m) {
            None
        } else {
            let mut m = Mat::zeros((n, n));
            for (j, &ok) in valid.iter().enumerate() {
                if !ok {
                    for i in 0..n {
                        m[[i, j]] = MASK_NEG;
                    }
                }
            }
            Some(m)
        };

        for layer in &self.slots.joint {
            x = layer.forward(tape, store, x, self.cfg.heads, mask.as_ref());
        }

        if mask.is_some() {
            let col = Mat::from_shape_fn((n, 1), |(i, _)| if valid[i] { 1.0 } else { 0.0 });
            let col = tape.constant(col);
            x = tape.mul_col(x, col);
        }
        let q2 = tape.slice_rows(x, 0, l);
        let f2 = tape.slice_rows(x, l, l + t_len);
        let o2 = if n_tok > 0 {
            tape.slice_rows(x, l + t_len, n)
        } else {
            tape.constant(Mat::zeros((0, d)))
        };
        Ok((q2, f2, o2))
    }

    /// Keyword-weighted pooling: `q_g = Σ_l softmax(W8·q_l)·q_l` over
    /// unmasked positions.
    pub fn pool_question(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Tx,
        q_mask: &[bool],
    ) -> Result<Tx> {
        if !q_mask.iter().any(|&m| m) {
            return Err(CoreError::Validation("fully masked question".into()));
        }
        let (l, _) = tape.shape(q);
        assert_eq!(q_mask.len(), l);
        let w8 = store.on(tape, self.slots.w_pool);
        let logits = tape.matmul(q, w8);
        let mask = Mat::from_shape_fn((l, 1), |(i, _)| if q_mask[i] { 0.0 } else { MASK_NEG });
        let mask = tape.constant(mask);
        let logits = tape.add(logits, mask);
        let row = tape.transpose(logits);
        let attn = tape.softmax_rows(row);
        Ok(tape.matmul(attn, q))
    }

    /// Full per-episode encoding: embed all three streams and contextualize.
    pub fn encode_episode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ep: &Episode,
    ) -> Result<Encoded> {
        let (q, q_mask) = self.embed_question(tape, store, &ep.question);
        let f = self.embed_frames(tape, store, ep)?;
        let (o, tokens) = self.embed_ocr_flat(tape, store, ep)?;
        let (q, f, o) = self.joint_encode(tape, store, q, &q_mask, f, o)?;
        Ok(Encoded { q, q_mask, f, o, tokens })
    }
}

fn bucket(token: &str, buckets: usize) -> usize {
    if token.is_empty() {
        return 0;
    }
    (fnv1a(token.to_lowercase().as_bytes()) % buckets as u64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            d: 16,
            visual_dim: 12,
            fasttext_dim: 300,
            id_embed_dim: 8,
            max_question_len: 6,
            joint_layers: 2,
            heads: 4,
            ffn_mult: 2,
            max_frames: 16,
            max_tracks: 8,
            question_buckets: 64,
            word_buckets: 128,
            max_seq: 256,
            ..EncoderConfig::default()
        }
    }

    fn setup() -> (Encoder, ParamStore) {
        let mut store = ParamStore::new(11);
        let enc = Encoder::new(small_cfg(), &mut store).unwrap();
        (enc, store)
    }

    fn tok(frame: usize, track: usize, text: &str) -> OcrToken {
        OcrToken {
            frame_index: frame,
            track_id: track,
            text: text.into(),
            bbox: crate::types::BoundingBox::new(0.1, 0.1, 0.3, 0.2).unwrap(),
        }
    }

    #[test]
    fn frame_embedding_zero_input_zero_params() {
        let (enc, mut store) = setup();
        for name in ["enc.w_vis", "enc.w_frame_te", "enc.ln_f.b"] {
            let slot = store.slot(name).unwrap();
            let shape = store.value(slot).raw_dim();
            store.set_value(slot, Mat::zeros(shape));
        }
        let mut tape = Tape::new();
        let out = enc.embed_frame(&mut tape, &store, &vec![0.0; 12], 3).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn temporal_id_distinguishes_frames() {
        let (enc, store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let visual: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let a = enc.embed_frame(&mut tape, &store, &visual, 0).unwrap();
        let b = enc.embed_frame(&mut tape, &store, &visual, 1).unwrap();
        assert_ne!(tape.value(a), tape.value(b));
    }

    #[test]
    fn frame_embedding_is_deterministic() {
        let (enc, store) = setup();
        let visual: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let mut t1 = Tape::new();
        let a = enc.embed_frame(&mut t1, &store, &visual, 2).unwrap();
        let mut t2 = Tape::new();
        let b = enc.embed_frame(&mut t2, &store, &visual, 2).unwrap();
        assert_eq!(t1.value(a), t2.value(b));
    }

    #[test]
    fn ocr_track_id_matters_and_width_is_d() {
        let (enc, store) = setup();
        let mut tape = Tape::new();
        let a = enc.embed_ocr(&mut tape, &store, &tok(0, 1, "stop")).unwrap();
        let b = enc.embed_ocr(&mut tape, &store, &tok(0, 2, "stop")).unwrap();
        assert_eq!(tape.shape(a), (1, 16));
        assert_ne!(tape.value(a), tape.value(b));
        assert!(enc
            .embed_ocr(&mut tape, &store, &tok(0, 99, "stop"))
            .is_err());
    }

    #[test]
    fn ocr_additivity_probe() {
        let (enc, mut store) = setup();
        for name in ["enc.w_phoc", "enc.w_ocr_te", "enc.w_ocr_ta"] {
            let slot = store.slot(name).unwrap();
            let shape = store.value(slot).raw_dim();
            store.set_value(slot, Mat::zeros(shape));
        }
        let token = tok(1, 3, "chips");
        let mut tape = Tape::new();
        let full = enc.embed_ocr(&mut tape, &store, &token).unwrap();

        // direct evaluation: LN(W3·word_vec) + LN(W7·box)
        let wv = enc.word_vec(&store, "chips");
        let wvm = Mat::from_shape_vec((1, 300), wv).unwrap();
        let w3 = store.value(store.slot("enc.w_word").unwrap());
        let part1 = wvm.dot(&w3.to_owned());
        let boxes = Mat::from_shape_vec((1, 4), token.bbox.as_array().to_vec()).unwrap();
        let w7 = store.value(store.slot("enc.w_box").unwrap());
        let part2 = boxes.dot(&w7.to_owned());
        let mut t2 = Tape::new();
        let p1 = t2.constant(part1);
        let g = store.on(&mut t2, store.slot("enc.ln_o.g").unwrap());
        let b = store.on(&mut t2, store.slot("enc.ln_o.b").unwrap());
        let ln1 = t2.layer_norm(p1, g, b);
        let p2 = t2.constant(part2);
        let bg = store.on(&mut t2, store.slot("enc.ln_box.g").unwrap());
        let bb = store.on(&mut t2, store.slot("enc.ln_box.b").unwrap());
        let ln2 = t2.layer_norm(p2, bg, bb);
        let expect = t2.add(ln1, ln2);

        let got = tape.value(full);
        let want = t2.value(expect);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn question_truncation_and_empty() {
        let (enc, store) = setup();
        let mut tape = Tape::new();
        let (q, mask) = enc.embed_question(&mut tape, &store, "");
        assert!(mask.iter().all(|&m| !m));
        assert!(tape.value(q).iter().all(|&v| v == 0.0));
        let long = vec!["word"; 25].join(" ");
        let (_, mask) = enc.embed_question(&mut tape, &store, &long);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 6);
        let (a, _) = enc.embed_question(&mut tape, &store, "same text twice");
        let (b, _) = enc.embed_question(&mut tape, &store, "same text twice");
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn word_vec_contract() {
        let (enc, store) = setup();
        assert_eq!(enc.word_bucket(""), 0);
        let a = enc.word_vec(&store, "stop");
        let b = enc.word_vec(&store, "stop");
        assert_eq!(a, b);
        assert_eq!(a.len(), 300);
    }

    #[test]
    fn word_bucket_collision_rate_matches_birthday_model() {
        let (enc, _) = setup();
        let m = 128.0f64;
        let n = 10_000;
        let mut seen = std::collections::HashSet::new();
        let mut used = std::collections::HashSet::new();
        let mut i = 0u64;
        while seen.len() < n {
            let w = format!("w{i}x{}", i * 7 + 3);
            i += 1;
            if seen.insert(w.clone()) {
                used.insert(enc.word_bucket(&w));
            }
        }
        let expected_distinct = m * (1.0 - (1.0 - 1.0 / m).powi(n as i32));
        let got = used.len() as f64;
        assert!(
            (got - expected_distinct).abs() / expected_distinct < 0.05,
            "distinct buckets {got} vs birthday estimate {expected_distinct}"
        );
    }

    #[test]
    fn provider_width_checked_at_registration() {
        struct P(usize);
        impl TokenVectorProvider for P {
            fn width(&self) -> usize {
                self.0
            }
            fn vector(&self, _t: &str) -> Vec<f64> {
                vec![1.0; self.0]
            }
        }
        let (mut enc, store) = setup();
        assert!(enc.register_word_provider(Box::new(P(10))).is_err());
        assert!(enc.register_word_provider(Box::new(P(300))).is_ok());
        assert_eq!(enc.word_vec(&store, "anything"), vec![1.0; 300]);
    }

    fn episode(t_len: usize, tokens_per_frame: usize) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Episode {
            id: "ep".into(),
            question: "what does the red sign say".into(),
            frames: (0..t_len)
                .map(|_| (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            ocr: (0..t_len)
                .map(|f| (0..tokens_per_frame).map(|s| tok(f, s % 8, &format!("w{f}x{s}"))).collect())
                .collect(),
            answers: vec!["w0x0".into()],
            annotation: None,
        }
    }

    #[test]
    fn joint_zero_layers_is_identity() {
        let mut store = ParamStore::new(3);
        let mut cfg = small_cfg();
        cfg.joint_layers = 0;
        let enc = Encoder::new(cfg, &mut store).unwrap();
        let ep = episode(4, 2);
        let mut tape = Tape::new();
        let (q, q_mask) = enc.embed_question(&mut tape, &store, &ep.question);
        let f = enc.embed_frames(&mut tape, &store, &ep).unwrap();
        let (o, _) = enc.embed_ocr_flat(&mut tape, &store, &ep).unwrap();
        let (q2, f2, o2) = enc.joint_encode(&mut tape, &store, q, &q_mask, f, o).unwrap();
        assert_eq!(tape.value(q), tape.value(q2));
        assert_eq!(tape.value(f), tape.value(f2));
        assert_eq!(tape.value(o), tape.value(o2));
    }

    #[test]
    fn joint_masked_rows_are_zero_and_sequence_cap_enforced() {
        let (enc, store) = setup();
        let ep = episode(4, 2);
        let mut tape = Tape::new();
        let (q, q_mask) = enc.embed_question(&mut tape, &store, "short question");
        let f = enc.embed_frames(&mut tape, &store, &ep).unwrap();
        let (o, _) = enc.embed_ocr_flat(&mut tape, &store, &ep).unwrap();
        let (q2, _, _) = enc.joint_encode(&mut tape, &store, q, &q_mask, f, o).unwrap();
        let qv = tape.value(q2);
        for (i, &ok) in q_mask.iter().enumerate() {
            if !ok {
                assert!(qv.row(i).iter().all(|&v| v == 0.0), "row {i} not zeroed");
            }
        }
        let big = episode(15, 17);
        let mut t2 = Tape::new();
        let (q, q_mask) = enc.embed_question(&mut t2, &store, &big.question);
        let f = enc.embed_frames(&mut t2, &store, &big).unwrap();
        let (o, _) = enc.embed_ocr_flat(&mut t2, &store, &big).unwrap();
        assert!(enc.joint_encode(&mut t2, &store, q, &q_mask, f, o).is_err());
    }

    #[test]
    fn joint_is_permutation_equivariant_over_tokens() {
        let (enc, store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = 6;
        let q0 = Mat::from_shape_fn((l, 16), |_| rng.gen_range(-1.0..1.0));
        let f0 = Mat::from_shape_fn((3, 16), |_| rng.gen_range(-1.0..1.0));
        let o0 = Mat::from_shape_fn((5, 16), |_| rng.gen_range(-1.0..1.0));
        let mask = vec![true; l];

        let mut t1 = Tape::new();
        let (q, f, o) = (t1.constant(q0.clone()), t1.constant(f0.clone()), t1.constant(o0.clone()));
        let (_, _, o_out) = enc.joint_encode(&mut t1, &store, q, &mask, f, o).unwrap();
        let base = t1.value(o_out).to_owned();

        // swap token rows 1 and 3
        let mut o1 = o0.clone();
        let r1 = o0.row(1).to_owned();
        let r3 = o0.row(3).to_owned();
        o1.row_mut(1).assign(&r3);
        o1.row_mut(3).assign(&r1);
        let mut t2 = Tape::new();
        let (q, f, o) = (t2.constant(q0), t2.constant(f0), t2.constant(o1));
        let (_, _, o_out2) = enc.joint_encode(&mut t2, &store, q, &mask, f, o).unwrap();
        let perm = t2.value(o_out2);

        for j in 0..16 {
            assert!((base[[1, j]] - perm[[3, j]]).abs() < 1e-12);
            assert!((base[[3, j]] - perm[[1, j]]).abs() < 1e-12);
            assert!((base[[0, j]] - perm[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_question_contract() {
        let (enc, mut store) = setup();
        let mut tape = Tape::new();
        // single unmasked word → pooled vector equals that row
        let q0 = Mat::from_shape_fn((6, 16), |(i, j)| (i * 16 + j) as f64 * 0.01);
        let q = tape.constant(q0.clone());
        let mut mask = vec![false; 6];
        mask[2] = true;
        let pooled = enc.pool_question(&mut tape, &store, q, &mask).unwrap();
        for j in 0..16 {
            assert!((tape.value(pooled)[[0, j]] - q0[[2, j]]).abs() < 1e-12);
        }
        // fully masked → error
        assert!(enc
            .pool_question(&mut tape, &store, q, &vec![false; 6])
            .is_err());
        // W8 = 0 → uniform attention → mean of unmasked rows
        let slot = store.slot("enc.w_pool").unwrap();
        store.set_value(slot, Mat::zeros((16, 1)));
        let mut t2 = Tape::new();
        let q = t2.constant(q0.clone());
        let mask = vec![true, true, true, false, false, false];
        let pooled = enc.pool_question(&mut t2, &store, q, &mask).unwrap();
        for j in 0..16 {
            let mean = (q0[[0, j]] + q0[[1, j]] + q0[[2, j]]) / 3.0;
            assert!((t2.value(pooled)[[0, j]] - mean).abs() < 1e-12);
        }
    }
}
