//! Post-LN transformer encoder layer shared by the joint encoder and the
//! answer decoder. Attention masking is additive: pass a matrix of 0 /
//! [`MASK_NEG`](crate::tensor::MASK_NEG) entries.

use crate::params::{Init, ParamStore};
use crate::tensor::{Mat, Tape, Tx};

pub struct LayerSlots {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

impl LayerSlots {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, ffn_mult: usize) -> Self {
        let h = d * ffn_mult;
        let p = |s: &str| format!("{prefix}.{s}");
        Self {
            wq: store.register(&p("wq"), d, d, Init::Xavier),
            bq: store.register(&p("bq"), 1, d, Init::Zeros),
            wk: store.register(&p("wk"), d, d, Init::Xavier),
            bk: store.register(&p("bk"), 1, d, Init::Zeros),
            wv: store.register(&p("wv"), d, d, Init::Xavier),
            bv: store.register(&p("bv"), 1, d, Init::Zeros),
            wo: store.register(&p("wo"), d, d, Init::Xavier),
            bo: store.register(&p("bo"), 1, d, Init::Zeros),
            ln1_g: store.register(&p("ln1.g"), 1, d, Init::Ones),
            ln1_b: store.register(&p("ln1.b"), 1, d, Init::Zeros),
            ffn_w1: store.register(&p("ffn.w1"), d, h, Init::Xavier),
            ffn_b1: store.register(&p("ffn.b1"), 1, h, Init::Zeros),
            ffn_w2: store.register(&p("ffn.w2"), h, d, Init::Xavier),
            ffn_b2: store.register(&p("ffn.b2"), 1, d, Init::Zeros),
            ln2_g: store.register(&p("ln2.g"), 1, d, Init::Ones),
            ln2_b: store.register(&p("ln2.b"), 1, d, Init::Zeros),
        }
    }

    /// One layer: `x = LN(x + MHA(x)); x = LN(x + FFN(x))`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Tx,
        heads: usize,
        mask: Option<&Mat>,
    ) -> Tx {
        let (_, d) = tape.shape(x);
        debug_assert_eq!(d % heads, 0, "hidden width not divisible by head count");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let wq = store.on(tape, self.wq);
        let bq = store.on(tape, self.bq);
        let wk = store.on(tape, self.wk);
        let bk = store.on(tape, self.bk);
        let wv = store.on(tape, self.wv);
        let bv = store.on(tape, self.bv);
        let q = tape.matmul(x, wq);
        let q = tape.add_row(q, bq);
        let k = tape.matmul(x, wk);
        let k = tape.add_row(k, bk);
        let v = tape.matmul(x, wv);
        let v = tape.add_row(v, bv);

        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, c0, c1);
            let kh = tape.slice_cols(k, c0, c1);
            let vh = tape.slice_cols(v, c0, c1);
            head_outs.push(tape.attention(qh, kh, vh, scale, mask));
        }
        let attn = tape.concat_cols(&head_outs);
        let wo = store.on(tape, self.wo);
        let bo = store.on(tape, self.bo);
        let attn = tape.matmul(attn, wo);
        let attn = tape.add_row(attn, bo);

        let res = tape.add(x, attn);
        let g1 = store.on(tape, self.ln1_g);
        let b1 = store.on(tape, self.ln1_b);
        let x = tape.layer_norm(res, g1, b1);

        let w1 = store.on(tape, self.ffn_w1);
        let fb1 = store.on(tape, self.ffn_b1);
        let w2 = store.on(tape, self.ffn_w2);
        let fb2 = store.on(tape, self.ffn_b2);
        let f = tape.matmul(x, w1);
        let f = tape.add_row(f, fb1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, fb2);

        let res = tape.add(x, f);
        let g2 = store.on(tape, self.ln2_g);
        let b2 = store.on(tape, self.ln2_b);
        tape.layer_norm(res, g2, b2)
    }
}

/// Register a stack of layers under `prefix.0`, `prefix.1`, ...
pub fn register_stack(
    store: &mut ParamStore,
    prefix: &str,
    n_layers: usize,
    d: usize,
    ffn_mult: usize,
) -> Vec<LayerSlots> {
    (0..n_layers)
        .map(|i| LayerSlots::register(store, &format!("{prefix}.{i}"), d, ffn_mult))
        .collect()
}
