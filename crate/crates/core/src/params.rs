//! Named parameter store, deterministic initialization, and Adam.
//!
//! Parameters are initialized from `hash(name) ^ seed`, so values depend only
//! on the (name, shape, seed) triple and never on registration order. During
//! inference the store is a read-only snapshot; training steps take `&mut`.

use ndarray::ArcArray2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::tensor::{Mat, Tape, Tx};

/// Deterministic 64-bit FNV-1a. Used wherever a stable cross-platform hash is
/// needed (parameter seeding, hash-bucketed embeddings, seed splitting).
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Glorot normal: `std = sqrt(2 / (fan_in + fan_out))`.
    Xavier,
    /// Gaussian with the given standard deviation (embedding tables).
    Normal(f64),
    Zeros,
    Ones,
}

pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<ArcArray2<f64>>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, names: Vec::new(), index: HashMap::new(), values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> usize {
        assert!(
            !self.index.contains_key(name),
            "parameter {name:?} registered twice"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(name.as_bytes()) ^ self.seed);
        let value = match init {
            Init::Xavier => {
                let std = (2.0 / (rows + cols) as f64).sqrt();
                Mat::from_shape_fn((rows, cols), |_| sample_normal(&mut rng) * std)
            }
            Init::Normal(std) => {
                Mat::from_shape_fn((rows, cols), |_| sample_normal(&mut rng) * std)
            }
            Init::Zeros => Mat::zeros((rows, cols)),
            Init::Ones => Mat::from_elem((rows, cols), 1.0),
        };
        let slot = self.values.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), slot);
        self.values.push(value.into());
        slot
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn value(&self, slot: usize) -> &ArcArray2<f64> {
        &self.values[slot]
    }

    /// Replace a parameter value (tests, checkpoint restore).
    pub fn set_value(&mut self, slot: usize, value: Mat) {
        assert_eq!(
            self.values[slot].shape(),
            value.shape(),
            "set_value: shape mismatch for {}",
            self.names[slot]
        );
        self.values[slot] = value.into();
    }

    /// Bind the parameter onto a tape as a differentiable leaf.
    pub fn on(&self, tape: &mut Tape, slot: usize) -> Tx {
        tape.param(slot, self.values[slot].clone())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArcArray2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Box–Muller standard normal draw.
fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Adam with bias correction. The learning-rate schedule lives with the
/// training loop; `step` takes the already-scheduled rate.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .values
            .iter()
            .map(|p| Mat::zeros((p.shape()[0], p.shape()[1])))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Mat>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(CoreError::Runtime(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Runtime(format!(
                    "non-finite gradient for parameter {}",
                    store.names[slot]
                )));
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            *m *= self.beta1;
            *m += &(g * (1.0 - self.beta1));
            *v *= self.beta2;
            azip_sq_accum(v, g, 1.0 - self.beta2);
            // ArcArray view_mut is copy-on-write: in place once tapes are dropped
            let val = store.values[slot].view_mut();
            ndarray::Zip::from(val).and(&*m).and(&*v).for_each(|p, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
        Ok(())
    }

    /// (m, v, t) snapshot for checkpointing.
    pub fn state(&self) -> (&[Mat], &[Mat], u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore(&mut self, m: Vec<Mat>, v: Vec<Mat>, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

fn azip_sq_accum(v: &mut Mat, g: &Mat, w: f64) {
    ndarray::Zip::from(v).and(g).for_each(|vi, &gi| *vi += w * gi * gi);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent_and_seeded() {
        let mut a = ParamStore::new(7);
        let sa = a.register("w1", 3, 4, Init::Xavier);
        a.register("w2", 2, 2, Init::Xavier);
        let mut b = ParamStore::new(7);
        b.register("w2", 2, 2, Init::Xavier);
        let sb = b.register("w1", 3, 4, Init::Xavier);
        assert_eq!(a.value(sa), b.value(sb));
        let mut c = ParamStore::new(8);
        let sc = c.register("w1", 3, 4, Init::Xavier);
        assert_ne!(a.value(sa), c.value(sc));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new(0);
        let slot = store.register("x", 1, 3, Init::Normal(1.0));
        let mut adam = Adam::new(&store);
        for _ in 0..500 {
            let g = store.value(slot).to_owned() * 2.0; // d/dx ||x||^2
            let mut grads = vec![None; store.len()];
            grads[slot] = Some(g);
            adam.step(&mut store, &grads, 0.05).unwrap();
        }
        assert!(store.value(slot).iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut store = ParamStore::new(0);
        let slot = store.register("x", 1, 1, Init::Ones);
        let mut adam = Adam::new(&store);
        let mut grads = vec![None; 1];
        grads[slot] = Some(Mat::from_elem((1, 1), f64::NAN));
        assert!(adam.step(&mut store, &grads, 0.1).is_err());
    }
}
