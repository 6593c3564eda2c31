//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every forward pass records nodes on a [`Tape`]; [`Tape::backward`] walks the
//! recording in reverse and accumulates gradients for parameter leaves and any
//! explicitly tracked input leaves. All values are 2-D row-major matrices
//! (vectors are `1×n` or `n×1`), which keeps the op set small and the
//! transformer passes on `ndarray`'s dgemm path.
//!
//! The engine is deliberately f64-only: the repository's gradient checks
//! compare against central finite differences at tolerances that f32 cannot
//! meet.

use ndarray::{concatenate, s, ArcArray2, Array2, Axis};
use smallvec::{smallvec, SmallVec};
use std::collections::HashMap;

pub type Mat = Array2<f64>;

/// Additive logit value used to mask attention/softmax entries.
/// Large enough that `exp(MASK_NEG - max)` underflows to exactly 0.
pub const MASK_NEG: f64 = -1e30;

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tx(usize);

type BackFn = Box<dyn Fn(&Mat) -> SmallVec<[Mat; 3]> + Send>;

struct Node {
    value: ArcArray2<f64>,
    parents: SmallVec<[usize; 3]>,
    backward: Option<BackFn>,
    requires_grad: bool,
    /// Parameter slot for parameter leaves.
    param: Option<usize>,
    /// Keep the final gradient around for this node (input-gradient checks).
    keep_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    /// Indexed by parameter slot; `None` when the parameter was unused.
    pub by_param: Vec<Option<Mat>>,
    /// Gradients of tracked (non-parameter) leaves, keyed by node handle.
    pub by_leaf: HashMap<usize, Mat>,
}

impl Grads {
    pub fn leaf(&self, t: Tx) -> Option<&Mat> {
        self.by_leaf.get(&t.0)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: Tx) -> &ArcArray2<f64> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tx) -> (usize, usize) {
        let s = self.nodes[t.0].value.shape();
        (s[0], s[1])
    }

    pub fn scalar(&self, t: Tx) -> f64 {
        debug_assert_eq!(self.shape(t), (1, 1), "scalar() on non-1x1 node");
        self.nodes[t.0].value[[0, 0]]
    }

    fn push(
        &mut self,
        value: Mat,
        parents: SmallVec<[usize; 3]>,
        backward: Option<BackFn>,
    ) -> Tx {
        let requires_grad =
            backward.is_some() && parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value: value.into(),
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
            param: None,
            keep_grad: false,
        });
        Tx(self.nodes.len() - 1)
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, value: Mat) -> Tx {
        self.push(value, smallvec![], None)
    }

    /// Differentiable input leaf whose gradient is retained.
    pub fn leaf(&mut self, value: Mat) -> Tx {
        self.nodes.push(Node {
            value: value.into(),
            parents: smallvec![],
            backward: None,
            requires_grad: true,
            param: None,
            keep_grad: true,
        });
        Tx(self.nodes.len() - 1)
    }

    /// Parameter leaf bound to a slot in the parameter store.
    pub fn param(&mut self, slot: usize, value: ArcArray2<f64>) -> Tx {
        self.nodes.push(Node {
            value,
            parents: smallvec![],
            backward: None,
            requires_grad: true,
            param: Some(slot),
            keep_grad: false,
        });
        Tx(self.nodes.len() - 1)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Tx, b: Tx) -> Tx {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, smallvec![a.0, b.0], Some(Box::new(|g| smallvec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: Tx, b: Tx) -> Tx {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, smallvec![a.0, b.0], Some(Box::new(|g| smallvec![g.clone(), -g])))
    }

    pub fn mul(&mut self, a: Tx, b: Tx) -> Tx {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let v = &av * &bv;
        self.push(
            v,
            smallvec![a.0, b.0],
            Some(Box::new(move |g| smallvec![g * &bv, g * &av])),
        )
    }

    pub fn scale(&mut self, a: Tx, c: f64) -> Tx {
        let v = &self.nodes[a.0].value * c;
        self.push(v, smallvec![a.0], Some(Box::new(move |g| smallvec![g * c])))
    }

    pub fn add_scalar(&mut self, a: Tx, c: f64) -> Tx {
        let v = &self.nodes[a.0].value + c;
        self.push(v, smallvec![a.0], Some(Box::new(|g| smallvec![g.clone()])))
    }

    /// Broadcast-add a `1×d` row to every row of `a` (bias add).
    pub fn add_row(&mut self, a: Tx, row: Tx) -> Tx {
        let (_, d) = self.shape(a);
        assert_eq!(self.shape(row), (1, d), "add_row: bias shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value.row(0);
        self.push(
            v,
            smallvec![a.0, row.0],
            Some(Box::new(|g| {
                let rsum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                smallvec![g.clone(), rsum]
            })),
        )
    }

    /// Scale row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: Tx, col: Tx) -> Tx {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "mul_col: column shape mismatch");
        let av = self.nodes[a.0].value.clone();
        let cv = self.nodes[col.0].value.clone();
        let v = &av * &cv.column(0).insert_axis(Axis(1));
        self.push(
            v,
            smallvec![a.0, col.0],
            Some(Box::new(move |g| {
                let da = g * &cv.column(0).insert_axis(Axis(1));
                let dc = (g * &av).sum_axis(Axis(1)).insert_axis(Axis(1));
                smallvec![da, dc]
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Tx, b: Tx) -> Tx {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul: inner dims {}x{} . {}x{}", ar, ac, br, bc);
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let v = av.dot(&bv);
        self.push(
            v,
            smallvec![a.0, b.0],
            Some(Box::new(move |g| {
                smallvec![g.dot(&bv.t()), av.t().dot(g)]
            })),
        )
    }

    pub fn transpose(&mut self, a: Tx) -> Tx {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, smallvec![a.0], Some(Box::new(|g| smallvec![g.t().to_owned()])))
    }

    // ---- structure ----

    pub fn concat_rows(&mut self, parts: &[Tx]) -> Tx {
        assert!(!parts.is_empty(), "concat_rows: empty");
        let views: Vec<_> = parts.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let sizes: Vec<usize> = parts.iter().map(|t| self.shape(*t).0).collect();
        let parents: SmallVec<[usize; 3]> = parts.iter().map(|t| t.0).collect();
        self.push(
            v,
            parents,
            Some(Box::new(move |g| {
                let mut out = SmallVec::new();
                let mut r = 0;
                for &n in &sizes {
                    out.push(g.slice(s![r..r + n, ..]).to_owned());
                    r += n;
                }
                out
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Tx]) -> Tx {
        assert!(!parts.is_empty(), "concat_cols: empty");
        let views: Vec<_> = parts.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let sizes: Vec<usize> = parts.iter().map(|t| self.shape(*t).1).collect();
        let parents: SmallVec<[usize; 3]> = parts.iter().map(|t| t.0).collect();
        self.push(
            v,
            parents,
            Some(Box::new(move |g| {
                let mut out = SmallVec::new();
                let mut c = 0;
                for &n in &sizes {
                    out.push(g.slice(s![.., c..c + n]).to_owned());
                    c += n;
                }
                out
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Tx, r0: usize, r1: usize) -> Tx {
        let (n, d) = self.shape(a);
        assert!(r0 <= r1 && r1 <= n, "slice_rows: bad range");
        let v = self.nodes[a.0].value.slice(s![r0..r1, ..]).to_owned();
        self.push(
            v,
            smallvec![a.0],
            Some(Box::new(move |g| {
                let mut da = Mat::zeros((n, d));
                da.slice_mut(s![r0..r1, ..]).assign(g);
                smallvec![da]
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Tx, c0: usize, c1: usize) -> Tx {
        let (n, d) = self.shape(a);
        assert!(c0 <= c1 && c1 <= d, "slice_cols: bad range");
        let v = self.nodes[a.0].value.slice(s![.., c0..c1]).to_owned();
        self.push(
            v,
            smallvec![a.0],
            Some(Box::new(move |g| {
                let mut da = Mat::zeros((n, d));
                da.slice_mut(s![.., c0..c1]).assign(g);
                smallvec![da]
            })),
        )
    }

    /// `out[i] = a[idx[i]]`; duplicate indices accumulate in the backward pass.
    pub fn gather_rows(&mut self, a: Tx, idx: &[usize]) -> Tx {
        let (n, d) = self.shape(a);
        for &i in idx {
            assert!(i < n, "gather_rows: index {} out of {}", i, n);
        }
        let mut v = Mat::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&self.nodes[a.0].value.row(i));
        }
        let idx = idx.to_vec();
        self.push(
            v,
            smallvec![a.0],
            Some(Box::new(move |g| {
                let mut da = Mat::zeros((n, d));
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = da.row_mut(i);
                    dst += &g.row(r);
                }
                smallvec![da]
            })),
        )
    }

    /// Row-major reshape (copy).
    pub fn reshape(&mut self, a: Tx, rows: usize, cols: usize) -> Tx {
        let (n, d) = self.shape(a);
        assert_eq!(n * d, rows * cols, "reshape: size mismatch");
        let flat: Vec<f64> = self.nodes[a.0].value.iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(
            v,
            smallvec![a.0],
            Some(Box::new(move |g| {
                let flat: Vec<f64> = g.iter().copied().collect();
                smallvec![Mat::from_shape_vec((n, d), flat).expect("reshape back")]
            })),
        )
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, a: Tx) -> Tx {
        let v = self.nodes[a.0].value.to_owned();
        self.constant(v)
    }

    // ---- nonlinearities ----

    pub fn sigmoid(&mut self, a: Tx) -> Tx {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        let y = v.clone();
        self.push(
            v,
            smallvec![a.0],
            Some(Box::new(move |g| smallvec![g * &(&y * &(1.0 - &y))])),
        )
    }

    pub fn tanh(&mut self, a: Tx) -> Tx {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let y = v.clone();
        self.push(
            v,
            smallvec![a.0],
            Some(Box::new(move |g| smallvec![g * &(1.0 - &y * &y)])),
        )
    }

    /// Smooth GELU (tanh form); avoids ReLU kinks that break finite-difference checks.
    pub fn gelu(&mut self, a: Tx) -> Tx {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let x = self.nodes[a.0].value.clone();
        let v = x.mapv(|x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()));
        self.push(
            v,
            smallvec![a.0],
            Some(Box::new(move |g| {
                let dv = x.mapv(|x| {
                    let u = C * (x + A * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
                });
                smallvec![g * &dv]
            })),
        )
    }

    pub fn softplus(&mut self, a: Tx) -> Tx {
        let x = self.nodes[a.0].value.clone();
        let v = x.mapv(softplus);
        self.push(
            v,
            smallvec![a.0],
            Some(Box::new(move |g| smallvec![g * &x.mapv(sigmoid)])),
        )
    }

    // ---- normalization / attention ----

    /// Row-wise layer normalization with affine parameters (`1×d` each).
    pub fn layer_norm(&mut self, x: Tx, gamma: Tx, beta: Tx) -> Tx {
        let (n, d) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, d), "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), (1, d), "layer_norm: beta shape");
        let xv = self.nodes[x.0].value.clone();
        let gv = self.nodes[gamma.0].value.clone();
        let bv = self.nodes[beta.0].value.clone();
        let mut xhat = Mat::zeros((n, d));
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.mean().unwrap_or(0.0);
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) * is;
            }
        }
        let mut v = Mat::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                v[[i, j]] = xhat[[i, j]] * gv[[0, j]] + bv[[0, j]];
            }
        }
        self.push(
            v,
            smallvec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g| {
                let mut dx = Mat::zeros((n, d));
                let mut dgamma = Mat::zeros((1, d));
                let mut dbeta = Mat::zeros((1, d));
                for i in 0..n {
                    let is = inv_std[i];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = g[[i, j]] * gv[[0, j]];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[[i, j]];
                        dgamma[[0, j]] += g[[i, j]] * xhat[[i, j]];
                        dbeta[[0, j]] += g[[i, j]];
                    }
                    let nf = d as f64;
                    for j in 0..d {
                        let dxh = g[[i, j]] * gv[[0, j]];
                        dx[[i, j]] =
                            is * (dxh - sum_dxh / nf - xhat[[i, j]] * sum_dxh_xh / nf);
                    }
                }
                smallvec![dx, dgamma, dbeta]
            })),
        )
    }

    /// Row-wise softmax. Mask by adding [`MASK_NEG`] to logits beforehand.
    pub fn softmax_rows(&mut self, a: Tx) -> Tx {
        let v = softmax_rows_val(&self.nodes[a.0].value.to_owned());
        let y = v.clone();
        self.push(
            v,
            smallvec![a.0],
            Some(Box::new(move |g| {
                let dot = (g * &y).sum_axis(Axis(1)).insert_axis(Axis(1));
                smallvec![&y * &(g - &dot)]
            })),
        )
    }

    /// Fused scaled dot-product attention for one head:
    /// `softmax(q·kᵀ·scale + mask) · v`.
    pub fn attention(&mut self, q: Tx, k: Tx, v: Tx, scale: f64, mask: Option<&Mat>) -> Tx {
        let (nq, dk) = self.shape(q);
        let (nk, dk2) = self.shape(k);
        let (nv, _dv) = self.shape(v);
        assert_eq!(dk, dk2, "attention: q/k width mismatch");
        assert_eq!(nk, nv, "attention: k/v length mismatch");
        let qv = self.nodes[q.0].value.clone();
        let kv = self.nodes[k.0].value.clone();
        let vv = self.nodes[v.0].value.clone();
        let mut scores = qv.dot(&kv.t()) * scale;
        if let Some(m) = mask {
            assert_eq!(m.shape(), [nq, nk], "attention: mask shape");
            scores += m;
        }
        let probs = softmax_rows_val(&scores);
        let out = probs.dot(&vv);
        let p = probs;
        self.push(
            out,
            smallvec![q.0, k.0, v.0],
            Some(Box::new(move |g| {
                let dv = p.t().dot(g);
                let dp = g.dot(&vv.t());
                let dot = (&dp * &p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = &p * &(dp - &dot);
                let dq = ds.dot(&kv) * scale;
                let dk = ds.t().dot(&qv) * scale;
                smallvec![dq, dk, dv]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Tx) -> Tx {
        let (n, d) = self.shape(a);
        let v = Mat::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(
            v,
            smallvec![a.0],
            Some(Box::new(move |g| smallvec![Mat::from_elem((n, d), g[[0, 0]])])),
        )
    }

    pub fn mean_all(&mut self, a: Tx) -> Tx {
        let (n, d) = self.shape(a);
        let inv = 1.0 / (n * d) as f64;
        let v = Mat::from_elem((1, 1), self.nodes[a.0].value.sum() * inv);
        self.push(
            v,
            smallvec![a.0],
            Some(Box::new(move |g| smallvec![Mat::from_elem((n, d), g[[0, 0]] * inv)])),
        )
    }

    // ---- fused objective / selection nodes ----

    /// Mean binary cross-entropy with logits over cells where `mask != 0`,
    /// in the numerically stable `max(x,0) − x·t + ln(1+e^{−|x|})` form.
    pub fn bce_with_logits_mean(&mut self, logits: Tx, targets: &Mat, mask: &Mat) -> Tx {
        let shape = self.shape(logits);
        assert_eq!(targets.shape(), [shape.0, shape.1], "bce: target shape");
        assert_eq!(mask.shape(), [shape.0, shape.1], "bce: mask shape");
        let x = self.nodes[logits.0].value.clone();
        let count = mask.iter().filter(|&&m| m != 0.0).count().max(1) as f64;
        let mut total = 0.0;
        for ((&xi, &ti), &mi) in x.iter().zip(targets.iter()).zip(mask.iter()) {
            if mi != 0.0 {
                total += xi.max(0.0) - xi * ti + (-xi.abs()).exp().ln_1p();
            }
        }
        let v = Mat::from_elem((1, 1), total / count);
        let t = targets.clone();
        let m = mask.clone();
        self.push(
            v,
            smallvec![logits.0],
            Some(Box::new(move |g| {
                let go = g[[0, 0]] / count;
                let mut dx = Mat::zeros(x.raw_dim());
                for ((dxi, (&xi, &ti)), &mi) in
                    dx.iter_mut().zip(x.iter().zip(t.iter())).zip(m.iter())
                {
                    if mi != 0.0 {
                        *dxi = (sigmoid(xi) - ti) * go;
                    }
                }
                smallvec![dx]
            })),
        )
    }

    /// Cosine similarity of two matrices treated as flat vectors → `1×1`.
    /// Caller must reject zero-norm inputs beforehand.
    pub fn cosine(&mut self, a: Tx, b: Tx) -> Tx {
        assert_eq!(self.shape(a), self.shape(b), "cosine: shape mismatch");
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let na = l2_norm(&av);
        let nb = l2_norm(&bv);
        assert!(na > 0.0 && nb > 0.0, "cosine: zero-norm input");
        let dot: f64 = av.iter().zip(bv.iter()).map(|(x, y)| x * y).sum();
        let sim = dot / (na * nb);
        let v = Mat::from_elem((1, 1), sim);
        self.push(
            v,
            smallvec![a.0, b.0],
            Some(Box::new(move |g| {
                let go = g[[0, 0]];
                let da = (&bv / (na * nb) - &(&av * (sim / (na * na)))) * go;
                let db = (&av / (na * nb) - &(&bv * (sim / (nb * nb)))) * go;
                smallvec![da, db]
            })),
        )
    }

    /// Hard one-hot of each row's argmax with straight-through gradients:
    /// forward emits the one-hot mask, backward passes the upstream gradient
    /// to the soft input unchanged. Ties resolve to the lowest column.
    pub fn straight_through_onehot(&mut self, soft: Tx) -> Tx {
        let (n, d) = self.shape(soft);
        let sv = &self.nodes[soft.0].value;
        let mut v = Mat::zeros((n, d));
        for i in 0..n {
            let row = sv.row(i);
            let mut best = 0;
            for j in 1..d {
                if row[j] > row[best] {
                    best = j;
                }
            }
            v[[i, best]] = 1.0;
        }
        self.push(v, smallvec![soft.0], Some(Box::new(|g| smallvec![g.clone()])))
    }

    // ---- backward ----

    /// Backpropagate from a `1×1` loss node. `n_params` sizes the parameter
    /// gradient table.
    pub fn backward(&self, root: Tx, n_params: usize) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be scalar");
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));
        let mut out = Grads { by_param: vec![None; n_params], by_leaf: HashMap::new() };
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let contribs = back(&g);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (&p, c) in node.parents.iter().zip(contribs.into_iter()) {
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => *acc += &c,
                        slot => *slot = Some(c),
                    }
                }
            }
            if let Some(slot) = node.param {
                match &mut out.by_param[slot] {
                    Some(acc) => *acc += &g,
                    entry => *entry = Some(g),
                }
            } else if node.keep_grad {
                out.by_leaf.insert(i, g);
            }
        }
        out
    }
}

// ---- free helpers ----

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn l2_norm(m: &ArcArray2<f64>) -> f64 {
    m.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

pub fn softmax_rows_val(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Central finite-difference gradient check against a scalar-valued function.
///
/// `f` evaluates the loss at the given input; the analytic gradient is checked
/// entry by entry at relative tolerance `tol` (with an absolute floor for
/// near-zero gradients). Returns the worst relative error observed.
pub fn finite_diff_check<F>(x: &Mat, analytic: &Mat, mut f: F, step: f64, tol: f64) -> f64
where
    F: FnMut(&Mat) -> f64,
{
    assert_eq!(x.shape(), analytic.shape());
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xp[idx];
        let h = step * orig.abs().max(1.0);
        xp[idx] = orig + h;
        let fp = f(&xp);
        xp[idx] = orig - h;
        let fm = f(&xp);
        xp[idx] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let ad = analytic[idx];
        let denom = ad.abs().max(fd.abs()).max(1e-6);
        let rel = (ad - fd).abs() / denom;
        if rel > worst {
            worst = rel;
        }
        assert!(
            rel <= tol,
            "finite-diff mismatch at {:?}: analytic={:.12e} numeric={:.12e} rel={:.3e}",
            idx,
            ad,
            fd,
            rel
        );
    }
    worst
}
