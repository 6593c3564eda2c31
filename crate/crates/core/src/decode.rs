//! Iterative transformer answer decoder with a vocabulary classifier and an
//! OCR-pointer classifier.
//!
//! The decoder attends over `[Q; F_sel; O_sel; D]` where the context block is
//! frozen (context positions attend only among themselves) and the hidden
//! block `D` is causal. The input at step `t` is a learned positional row
//! plus the embedding of the previous emission (`<begin>` at step 0): a
//! vocabulary word uses its embedding-table row, an OCR emission reuses the
//! candidate's encoded vector. Pointer scores are a learned bilinear form
//! between each step's hidden state and the candidate vectors.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::{Mat, Tape, Tx, MASK_NEG};
use crate::text::word_key;
use crate::transformer::{self, LayerSlots};
use crate::types::{AnswerDecoding, EmittedToken, TokenSource};

pub const PAD_ID: usize = 0;
pub const BEGIN_ID: usize = 1;
pub const END_ID: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<begin>", "<end>"];

/// Fixed answer vocabulary; ids 0–2 are the reserved tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    exact: HashMap<String, usize>,
    /// `word_key` → first (most frequent) id with that key.
    keyed: HashMap<String, usize>,
}

impl Vocab {
    /// Build from content words in frequency order; reserved tokens are
    /// prepended and duplicates dropped.
    pub fn from_content_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut list: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: HashMap<String, usize> = list
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        for w in words {
            if !seen.contains_key(&w) {
                seen.insert(w.clone(), list.len());
                list.push(w);
            }
        }
        let mut keyed = HashMap::new();
        for (i, w) in list.iter().enumerate().skip(RESERVED.len()) {
            let k = word_key(w);
            if !k.is_empty() {
                keyed.entry(k).or_insert(i);
            }
        }
        Self { words: list, exact: seen, keyed }
    }

    /// Load a newline-delimited vocabulary (rank order = frequency order).
    /// The first three lines must be the reserved tokens.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len()
            || lines[..RESERVED.len()] != RESERVED[..]
        {
            return Err(CoreError::parse(
                path.display().to_string(),
                format!("vocabulary must start with reserved tokens {RESERVED:?}"),
            ));
        }
        Ok(Self::from_content_words(
            lines[RESERVED.len()..].iter().map(|s| s.to_string()),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.words.join("\n"))
            .map_err(|e| CoreError::io(path.display().to_string(), e))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.exact.get(word).copied()
    }

    /// Case-insensitive, punctuation-stripped lookup.
    pub fn id_by_key(&self, word: &str) -> Option<usize> {
        self.keyed.get(&word_key(word)).copied()
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    /// Decoding steps `L_a`.
    pub steps: usize,
    pub vocab_size: usize,
    pub d: usize,
    pub heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { layers: 3, steps: 12, vocab_size: 5000, d: 768, heads: 8 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CoreError::Config("decoder steps must be at least 1".into()));
        }
        // 0 is the "take the size from the vocabulary file" sentinel
        if self.vocab_size != 0 && self.vocab_size <= RESERVED.len() {
            return Err(CoreError::Config(format!(
                "vocab_size must exceed the {} reserved tokens",
                RESERVED.len()
            )));
        }
        if self.d == 0 || self.d % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "decoder width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Previous-emission feedback for one decoding step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    Vocab(usize),
    /// Index into the decoder's OCR candidate list.
    Ocr(usize),
    Pad,
}

/// Tape-level decoder output under teacher forcing.
pub struct TfForward {
    /// `steps × vocab_size`.
    pub voc_logits: Tx,
    /// `steps × #candidates`, absent when no OCR candidates were supplied.
    pub ocr_logits: Option<Tx>,
}

/// Per-step multi-label targets plus the teacher-forcing inputs.
pub struct StepTargets {
    /// `steps × (vocab_size + pad_width)`, binary.
    pub targets: Mat,
    /// Same shape; 1.0 on supervised (step, real-class) cells.
    pub mask: Mat,
    /// Input feedback per step; `teacher[0]` is `<begin>`.
    pub teacher: Vec<Feedback>,
    /// Set when a ground-truth word matched neither vocabulary nor candidates.
    pub unanswerable: bool,
    pub supervised_steps: usize,
}

/// Per-step binary targets over `[vocabulary; OCR candidates]`. A cell is 1
/// when its word equals (case-insensitive, punctuation-stripped) the
/// ground-truth word at that step; vocabulary and OCR cells may both fire.
/// Targets from every ground-truth answer are unioned; the first answer
/// drives teacher forcing. Unmatched ground-truth words leave a zero row and
/// flag the episode.
pub fn build_targets(
    answers: &[String],
    vocab: &Vocab,
    ocr_words: &[String],
    steps: usize,
    pad_width: usize,
) -> StepTargets {
    let v = vocab.len();
    let m = ocr_words.len();
    let width = v + pad_width.max(m);
    let mut targets = Mat::zeros((steps, width));
    let mut mask = Mat::zeros((steps, width));
    let mut supervised = vec![false; steps];
    let mut unanswerable = false;

    let ocr_keys: Vec<String> = ocr_words.iter().map(|w| word_key(w)).collect();

    for (ai, answer) in answers.iter().enumerate() {
        let words: Vec<&str> = answer.split_whitespace().collect();
        let n = words.len().min(steps.saturating_sub(1));
        for (t, word) in words.iter().take(n).enumerate() {
            supervised[t] = true;
            let key = word_key(word);
            let mut matched = false;
            if let Some(id) = vocab.id_by_key(word) {
                targets[[t, id]] = 1.0;
                matched = true;
            }
            if !key.is_empty() {
                for (j, k) in ocr_keys.iter().enumerate() {
                    if *k == key {
                        targets[[t, v + j]] = 1.0;
                        matched = true;
                    }
                }
            }
            if !matched && ai == 0 {
                unanswerable = true;
            }
        }
        if n < steps {
            targets[[n, END_ID]] = 1.0;
            supervised[n] = true;
        }
    }

    for (t, &sup) in supervised.iter().enumerate() {
        if sup {
            for c in 0..v + m {
                mask[[t, c]] = 1.0;
            }
        }
    }

    // teacher inputs from the first answer
    let mut teacher = vec![Feedback::Pad; steps];
    teacher[0] = Feedback::Vocab(BEGIN_ID);
    if let Some(answer) = answers.first() {
        let words: Vec<&str> = answer.split_whitespace().collect();
        for (t, word) in words.iter().enumerate() {
            if t + 1 >= steps {
                break;
            }
            teacher[t + 1] = if let Some(id) = vocab.id_by_key(word) {
                Feedback::Vocab(id)
            } else {
                let key = word_key(word);
                match ocr_keys.iter().position(|k| *k == key && !key.is_empty()) {
                    Some(j) => Feedback::Ocr(j),
                    None => Feedback::Pad,
                }
            };
        }
        let end_step = words.len() + 1;
        if end_step < steps {
            teacher[end_step] = Feedback::Vocab(END_ID);
        }
    }

    let supervised_steps = supervised.iter().filter(|&&s| s).count();
    StepTargets { targets, mask, teacher, unanswerable, supervised_steps }
}

/// Join emitted words with single spaces, dropping reserved tokens.
pub fn render_answer(dec: &AnswerDecoding) -> String {
    dec.tokens
        .iter()
        .filter(|t| match t.source {
            TokenSource::Vocab(id) => !Vocab::is_reserved(id),
            TokenSource::Ocr(_) => true,
        })
        .map(|t| t.word.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

struct DecoderSlots {
    w_q: usize,
    w_f: usize,
    w_o: usize,
    w_d: usize,
    pos_table: usize,
    layers: Vec<LayerSlots>,
    w_voc: usize,
    b_voc: usize,
    w_dp: usize,
    b_dp: usize,
    w_op: usize,
    b_op: usize,
    vocab_embed: usize,
}

pub struct Decoder {
    pub cfg: DecoderConfig,
    slots: DecoderSlots,
}

/// Context handed to one decode call.
pub struct DecodeInputs<'a> {
    pub q: Tx,
    pub q_mask: &'a [bool],
    /// Selected (or full) frame features.
    pub f_sel: Tx,
    /// Selected (or full) OCR token features; `0×d` when absent.
    pub o_sel: Tx,
    /// Recognized text per OCR candidate, aligned with `o_sel` rows.
    pub ocr_words: &'a [String],
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab_size == 0 {
            return Err(CoreError::Config(
                "decoder requires a concrete vocab_size (0 is only valid inside a model config)"
                    .into(),
            ));
        }
        let d = cfg.d;
        let slots = DecoderSlots {
            w_q: store.register("dec.w_q", d, d, Init::Xavier),
            w_f: store.register("dec.w_f", d, d, Init::Xavier),
            w_o: store.register("dec.w_o", d, d, Init::Xavier),
            w_d: store.register("dec.w_d", d, d, Init::Xavier),
            pos_table: store.register("dec.pos", cfg.steps, d, Init::Normal(0.02)),
            layers: transformer::register_stack(store, "dec.layer", cfg.layers, d, 4),
            w_voc: store.register("dec.w_voc", d, cfg.vocab_size, Init::Xavier),
            b_voc: store.register("dec.b_voc", 1, cfg.vocab_size, Init::Zeros),
            w_dp: store.register("dec.w_dp", d, d, Init::Xavier),
            b_dp: store.register("dec.b_dp", 1, d, Init::Zeros),
            w_op: store.register("dec.w_op", d, d, Init::Xavier),
            b_op: store.register("dec.b_op", 1, d, Init::Zeros),
            vocab_embed: store.register("dec.vocab_embed", cfg.vocab_size, d, Init::Normal(0.02)),
        };
        Ok(Self { cfg, slots })
    }

    fn feedback_rows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        o_sel: Tx,
        feedback: &[Feedback],
    ) -> Tx {
        let pos = store.on(tape, self.slots.pos_table);
        let pos = tape.slice_rows(pos, 0, feedback.len());
        let embed_table = store.on(tape, self.slots.vocab_embed);
        let rows: Vec<Tx> = feedback
            .iter()
            .map(|fb| match fb {
                Feedback::Vocab(id) => tape.gather_rows(embed_table, &[*id]),
                Feedback::Ocr(j) => tape.gather_rows(o_sel, &[*j]),
                Feedback::Pad => tape.gather_rows(embed_table, &[PAD_ID]),
            })
            .collect();
        let prev = tape.concat_rows(&rows);
        tape.add(pos, prev)
    }

    /// Run the decoder transformer for `n_steps` and return the hidden rows.
    fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &DecodeInputs,
        feedback: &[Feedback],
    ) -> Result<(Tx, Option<Tx>)> {
        if !inputs.q_mask.iter().any(|&m| m) {
            return Err(CoreError::Validation("decoder requires a non-empty question".into()));
        }
        let (l, _) = tape.shape(inputs.q);
        let (kf, _) = tape.shape(inputs.f_sel);
        let (kt, _) = tape.shape(inputs.o_sel);
        if kt != inputs.ocr_words.len() {
            return Err(CoreError::Validation(format!(
                "{} OCR features vs {} candidate words",
                kt,
                inputs.ocr_words.len()
            )));
        }
        let n_steps = feedback.len();
        debug_assert!(n_steps >= 1 && n_steps <= self.cfg.steps);

        let wq = store.on(tape, self.slots.w_q);
        let q = tape.matmul(inputs.q, wq);
        let wf = store.on(tape, self.slots.w_f);
        let f = tape.matmul(inputs.f_sel, wf);
        let mut parts = vec![q, f];
        if kt > 0 {
            let wo = store.on(tape, self.slots.w_o);
            parts.push(tape.matmul(inputs.o_sel, wo));
        }
        let d_in = self.feedback_rows(tape, store, inputs.o_sel, feedback);
        let wd = store.on(tape, self.slots.w_d);
        parts.push(tape.matmul(d_in, wd));
        let mut x = tape.concat_rows(&parts);

        let n_ctx = l + kf + kt;
        let n = n_ctx + n_steps;
        let mut mask = Mat::zeros((n, n));
        for (j, &ok) in inputs.q_mask.iter().enumerate() {
            if !ok {
                for i in 0..n {
                    mask[[i, j]] = MASK_NEG;
                }
            }
        }
        for s in 0..n_steps {
            let col = n_ctx + s;
            // context never sees the hidden block; step t sees steps ≤ t
            for i in 0..n_ctx + s {
                if i < n_ctx || i < col {
                    mask[[i, col]] = MASK_NEG;
                }
            }
        }

        for layer in &self.slots.layers {
            x = layer.forward(tape, store, x, self.cfg.heads, Some(&mask));
        }
        let d_rows = tape.slice_rows(x, n_ctx, n);

        let w_voc = store.on(tape, self.slots.w_voc);
        let b_voc = store.on(tape, self.slots.b_voc);
        let voc = tape.matmul(d_rows, w_voc);
        let voc = tape.add_row(voc, b_voc);

        let ocr = if kt > 0 {
            let w_dp = store.on(tape, self.slots.w_dp);
            let b_dp = store.on(tape, self.slots.b_dp);
            let dp = tape.matmul(d_rows, w_dp);
            let dp = tape.add_row(dp, b_dp);
            let w_op = store.on(tape, self.slots.w_op);
            let b_op = store.on(tape, self.slots.b_op);
            let op = tape.matmul(inputs.o_sel, w_op);
            let op = tape.add_row(op, b_op);
            let opt = tape.transpose(op);
            Some(tape.matmul(dp, opt))
        } else {
            None
        };
        Ok((voc, ocr))
    }

    /// Teacher-forced decode: one pass over all `L_a` steps.
    pub fn decode_tf(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &DecodeInputs,
        teacher: &[Feedback],
    ) -> Result<TfForward> {
        debug_assert_eq!(teacher.len(), self.cfg.steps);
        let (voc, ocr) = self.run(tape, store, inputs, teacher)?;
        Ok(TfForward { voc_logits: voc, ocr_logits: ocr })
    }

    /// Greedy decode with early stop at `<end>`. Per-step score vectors are
    /// padded to `pad_width` OCR cells with `-inf`.
    pub fn decode_greedy(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &DecodeInputs,
        vocab: &Vocab,
        pad_width: usize,
    ) -> Result<AnswerDecoding> {
        if vocab.len() != self.cfg.vocab_size {
            return Err(CoreError::Config(format!(
                "vocabulary size {} != decoder vocab_size {}",
                vocab.len(),
                self.cfg.vocab_size
            )));
        }
        let v = self.cfg.vocab_size;
        let m = inputs.ocr_words.len();
        let width = v + pad_width.max(m);
        let mut feedback = vec![Feedback::Vocab(BEGIN_ID)];
        let mut tokens = Vec::new();
        let mut step_scores = Vec::new();
        for t in 0..self.cfg.steps {
            let (voc, ocr) = self.run(tape, store, inputs, &feedback)?;
            let voc_row = tape.value(voc).row(t).to_vec();
            let ocr_row: Vec<f64> = match ocr {
                Some(o) => tape.value(o).row(t).to_vec(),
                None => Vec::new(),
            };
            let mut scores = vec![f64::NEG_INFINITY; width];
            scores[..v].copy_from_slice(&voc_row);
            scores[v..v + m].copy_from_slice(&ocr_row);

            let mut best = 0usize;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            step_scores.push(scores);
            // feedback keys on the emitted WORD, mirroring the teacher rule:
            // words with a vocabulary entry always feed their table embedding,
            // even when the pointer head produced them
            let (token, fb) = if best < v {
                (
                    EmittedToken { word: vocab.word(best).to_string(), source: TokenSource::Vocab(best) },
                    Feedback::Vocab(best),
                )
            } else {
                let j = best - v;
                let word = inputs.ocr_words[j].clone();
                let fb = match vocab.id_by_key(&word) {
                    Some(id) => Feedback::Vocab(id),
                    None => Feedback::Ocr(j),
                };
                (EmittedToken { word, source: TokenSource::Ocr(j) }, fb)
            };
            let stop = matches!(token.source, TokenSource::Vocab(END_ID));
            tokens.push(token);
            if stop {
                break;
            }
            feedback.push(fb);
        }
        Ok(AnswerDecoding { tokens, step_scores })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::from_content_words(
            ["stop", "go", "sign", "30", "left", "right", "red"]
                .iter()
                .map(|s| s.to_string()),
        )
    }

    fn small_decoder(vocab_size: usize) -> (Decoder, ParamStore) {
        let mut store = ParamStore::new(17);
        let cfg = DecoderConfig { layers: 1, steps: 4, vocab_size, d: 16, heads: 4 };
        let dec = Decoder::new(cfg, &mut store).unwrap();
        (dec, store)
    }

    fn randm(r: usize, c: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-0.5..0.5))
    }

    fn inputs<'a>(
        tape: &mut Tape,
        q_mask: &'a [bool],
        n_tok: usize,
        ocr_words: &'a [String],
    ) -> DecodeInputs<'a> {
        DecodeInputs {
            q: tape.constant(randm(q_mask.len(), 16, 1)),
            q_mask,
            f_sel: tape.constant(randm(3, 16, 2)),
            o_sel: tape.constant(randm(n_tok, 16, 3)),
            ocr_words,
        }
    }

    #[test]
    fn empty_ocr_gives_vocab_only_emissions() {
        let voc = vocab();
        let (dec, store) = small_decoder(voc.len());
        let mut tape = Tape::new();
        let mask = vec![true; 5];
        let ins = inputs(&mut tape, &mask, 0, &[]);
        let out = dec.decode_greedy(&mut tape, &store, &ins, &voc, 25).unwrap();
        assert!(!out.tokens.is_empty());
        assert!(out
            .tokens
            .iter()
            .all(|t| matches!(t.source, TokenSource::Vocab(_))));
        // padded OCR block never wins the argmax
        for row in &out.step_scores {
            assert!(row[voc.len()..].iter().all(|&s| s == f64::NEG_INFINITY));
        }
    }

    #[test]
    fn immediate_end_renders_empty_answer() {
        let voc = vocab();
        let (dec, mut store) = small_decoder(voc.len());
        let slot = store.slot("dec.b_voc").unwrap();
        let mut bias = Mat::zeros((1, voc.len()));
        bias[[0, END_ID]] = 50.0;
        store.set_value(slot, bias);
        let mut tape = Tape::new();
        let mask = vec![true; 5];
        let ins = inputs(&mut tape, &mask, 0, &[]);
        let out = dec.decode_greedy(&mut tape, &store, &ins, &voc, 25).unwrap();
        assert_eq!(out.tokens.len(), 1);
        assert_eq!(out.tokens[0].source, TokenSource::Vocab(END_ID));
        assert_eq!(render_answer(&out), "");
    }

    #[test]
    fn empty_question_is_an_error() {
        let voc = vocab();
        let (dec, store) = small_decoder(voc.len());
        let mut tape = Tape::new();
        let mask = vec![false; 5];
        let ins = inputs(&mut tape, &mask, 0, &[]);
        assert!(dec.decode_greedy(&mut tape, &store, &ins, &voc, 25).is_err());
    }

    #[test]
    fn causality_perturbation_leaves_earlier_steps_unchanged() {
        let voc = vocab();
        let (dec, mut store) = small_decoder(voc.len());
        // suppress <end> so decoding runs the full step budget
        let slot = store.slot("dec.b_voc").unwrap();
        let mut bias = Mat::zeros((1, voc.len()));
        bias[[0, END_ID]] = -50.0;
        store.set_value(slot, bias);
        let words: Vec<String> = vec!["oak".into(), "elm".into()];
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let mask = vec![true; 5];
            let ins = inputs(&mut tape, &mask, 2, &words);
            dec.decode_greedy(&mut tape, &store, &ins, &voc, 25).unwrap()
        };
        let base = run(&store);
        assert!(base.step_scores.len() >= 3, "needs ≥3 steps for the check");
        // perturb the positional row used only at step 2
        let slot = store.slot("dec.pos").unwrap();
        let mut pos = store.value(slot).to_owned();
        pos[[2, 0]] += 10.0;
        store.set_value(slot, pos);
        let pert = run(&store);
        for t in 0..2 {
            assert_eq!(base.step_scores[t], pert.step_scores[t], "step {t} changed");
        }
        assert_ne!(base.step_scores[2], pert.step_scores[2]);
    }

    #[test]
    fn pointer_is_permutation_equivariant() {
        let voc = vocab();
        let (dec, store) = small_decoder(voc.len());
        let feats = randm(3, 16, 44);
        let words: Vec<String> = vec!["alpha".into(), "beta".into(), "gamma".into()];
        let run = |feats: Mat, words: &[String]| {
            let mut tape = Tape::new();
            let mask = vec![true; 5];
            let ins = DecodeInputs {
                q: tape.constant(randm(5, 16, 1)),
                q_mask: &mask,
                f_sel: tape.constant(randm(3, 16, 2)),
                o_sel: tape.constant(feats),
                ocr_words: words,
            };
            let dec_out = dec.decode_greedy(&mut tape, &store, &ins, &voc, 9).unwrap();
            (render_answer(&dec_out), dec_out)
        };
        let (ans_a, out_a) = run(feats.clone(), &words);
        // permute candidates 0 and 2
        let mut permuted = feats.clone();
        let r0 = feats.row(0).to_owned();
        let r2 = feats.row(2).to_owned();
        permuted.row_mut(0).assign(&r2);
        permuted.row_mut(2).assign(&r0);
        let pwords = vec![words[2].clone(), words[1].clone(), words[0].clone()];
        let (ans_b, out_b) = run(permuted, &pwords);
        assert_eq!(ans_a, ans_b);
        let v = voc.len();
        for (ra, rb) in out_a.step_scores.iter().zip(out_b.step_scores.iter()) {
            assert!((ra[v] - rb[v + 2]).abs() < 1e-9);
            assert!((ra[v + 2] - rb[v]).abs() < 1e-9);
            assert!((ra[v + 1] - rb[v + 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn build_targets_contract() {
        let voc = vocab();
        let ocr: Vec<String> = vec!["stop".into(), "fuel".into()];
        let t = build_targets(&["stop".to_string()], &voc, &ocr, 4, 25);
        assert_eq!(t.targets.shape(), [4, voc.len() + 25]);
        let stop_id = voc.id("stop").unwrap();
        assert_eq!(t.targets[[0, stop_id]], 1.0);
        assert_eq!(t.targets[[0, voc.len()]], 1.0); // OCR candidate 0
        assert_eq!(t.targets[[1, END_ID]], 1.0);
        assert!(!t.unanswerable);
        assert_eq!(t.supervised_steps, 2);
        assert_eq!(t.teacher[0], Feedback::Vocab(BEGIN_ID));
        assert_eq!(t.teacher[1], Feedback::Vocab(stop_id));

        // word matches punctuation-stripped and case-insensitive
        let t = build_targets(&["STOP.".to_string()], &voc, &ocr, 4, 25);
        assert_eq!(t.targets[[0, stop_id]], 1.0);

        // absent everywhere → zero row, flagged
        let t = build_targets(&["zebra".to_string()], &voc, &ocr, 4, 25);
        assert!(t.unanswerable);
        assert!(t.targets.row(0).iter().all(|&x| x == 0.0));
        assert_eq!(t.targets[[1, END_ID]], 1.0);
    }

    #[test]
    fn target_shape_audit_over_random_worlds() {
        let voc = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let m = rng.gen_range(0..6);
            let ocr: Vec<String> = (0..m).map(|i| format!("tok{i}")).collect();
            let steps = rng.gen_range(2..8);
            let pad = 25;
            let answer = vec![
                (0..rng.gen_range(1..4))
                    .map(|i| format!("w{i}"))
                    .collect::<Vec<_>>()
                    .join(" "),
            ];
            let t = build_targets(&answer, &voc, &ocr, steps, pad);
            assert_eq!(t.targets.shape(), [steps, voc.len() + pad]);
            assert_eq!(t.mask.shape(), [steps, voc.len() + pad]);
            assert_eq!(t.teacher.len(), steps);
        }
    }

    #[test]
    fn render_rules() {
        let mk = |tokens: Vec<EmittedToken>| AnswerDecoding { tokens, step_scores: vec![] };
        let d = mk(vec![EmittedToken { word: "stop".into(), source: TokenSource::Vocab(3) }]);
        assert_eq!(render_answer(&d), "stop");
        let d = mk(vec![EmittedToken { word: "0.79".into(), source: TokenSource::Ocr(0) }]);
        assert_eq!(render_answer(&d), "0.79");
        let d = mk(vec![
            EmittedToken { word: "30".into(), source: TokenSource::Vocab(6) },
            EmittedToken { word: "m.p.h.".into(), source: TokenSource::Ocr(1) },
            EmittedToken { word: "<end>".into(), source: TokenSource::Vocab(END_ID) },
        ]);
        assert_eq!(render_answer(&d), "30 m.p.h.");
    }

    #[test]
    fn vocab_file_roundtrip_and_reserved_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let voc = vocab();
        voc.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.len(), voc.len());
        assert_eq!(loaded.id("stop"), voc.id("stop"));
        std::fs::write(&path, "stop\ngo\n").unwrap();
        assert!(Vocab::load(&path).is_err());
    }

    #[test]
    fn teacher_forced_overfit_decreases_monotonically() {
        use crate::objective;
        let voc = vocab();
        let (dec, mut store) = small_decoder(voc.len());
        let mut adam = crate::params::Adam::new(&store);
        let ocr_words: Vec<String> = vec!["4.99".into(), "stop".into()];
        let t = build_targets(&["stop".to_string()], &voc, &ocr_words, 4, 2);
        let q0 = randm(5, 16, 70);
        let f0 = randm(3, 16, 71);
        let o0 = randm(2, 16, 72);
        let mask = vec![true; 5];
        let mut last = f64::INFINITY;
        let mut final_loss = f64::INFINITY;
        for step in 0..50 {
            let mut tape = Tape::new();
            let ins = DecodeInputs {
                q: tape.constant(q0.clone()),
                q_mask: &mask,
                f_sel: tape.constant(f0.clone()),
                o_sel: tape.constant(o0.clone()),
                ocr_words: &ocr_words,
            };
            let fwd = dec.decode_tf(&mut tape, &store, &ins, &t.teacher).unwrap();
            let loss =
                objective::bce_loss(&mut tape, fwd.voc_logits, fwd.ocr_logits, &t).unwrap();
            let val = tape.scalar(loss);
            assert!(
                val <= last + 1e-9,
                "BCE rose at step {step}: {last} → {val}"
            );
            last = val;
            final_loss = val;
            let grads = tape.backward(loss, store.len());
            adam.step(&mut store, &grads.by_param, 5e-3).unwrap();
        }
        assert!(final_loss < 0.05, "overfit BCE stuck at {final_loss}");
    }
}
