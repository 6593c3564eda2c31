//! Training loop, checkpointing, and split evaluation.
//!
//! Everything that varies across iterations is a pure function of
//! `(config, seed, iteration)`: batch membership comes from a per-epoch
//! permutation, Gumbel noise from per-(iteration, episode) derived seeds, so
//! an interrupted run resumed from a checkpoint continues identically.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::decode::Vocab;
use crate::error::{CoreError, Result};
use crate::io::{AnnotatedEpisode, Prediction};
use crate::metrics::{self, MetricReport};
use crate::params::{fnv1a, Adam};
use crate::pipeline::{Model, ModelConfig, PredictOutput};
use crate::synth::{self, SynthConfig};
use crate::tensor::Mat;
use crate::types::{Episode, GroundingResult};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimConfig {
    /// Base learning rate for the adaptive-moment optimizer.
    pub lr: f64,
    /// Iterations at which the rate is multiplied by `decay` (staircase).
    pub milestones: Vec<u64>,
    pub decay: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    /// Validation cadence; 0 disables mid-run evaluation.
    pub eval_every: u64,
    /// Stop once validation accuracy reaches this value (percent).
    pub early_stop_val_acc: Option<f64>,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Print a loss line every N iterations; 0 is silent.
    pub log_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            milestones: vec![10_000, 20_000],
            decay: 0.1,
            batch_size: 8,
            max_iterations: 24_000,
            eval_every: 200,
            early_stop_val_acc: None,
            clip_norm: 5.0,
            log_every: 50,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be at least 1".into()));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::Config("milestones must be strictly increasing".into()));
        }
        if !(self.lr > 0.0) || !(0.0 < self.decay && self.decay <= 1.0) {
            return Err(CoreError::Config("invalid learning-rate schedule".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count() as i32;
        self.lr * self.decay.powi(passed)
    }
}

/// Episode counts per generated split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        Self { train: 500, val: 100, test: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub dataset: DatasetSizes,
    pub optimizer: OptimConfig,
    pub seed: u64,
    /// Dataset root holding `train/`, `val/`, `test/` splits and `vocab.txt`.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()
    }

    /// Experiment identity: everything except the file-system paths.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        #[derive(Serialize)]
        struct HashView<'a> {
            model: &'a ModelConfig,
            synth: &'a SynthConfig,
            dataset: &'a DatasetSizes,
            optimizer: &'a OptimConfig,
            seed: u64,
        }
        let view = HashView {
            model: &self.model,
            synth: &self.synth,
            dataset: &self.dataset,
            optimizer: &self.optimizer,
            seed: self.seed,
        };
        let json = serde_json::to_string(&view).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        synth::hex_string(&h.finalize())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STQC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned training state: parameters, optimizer moments, progress.
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub iteration: u64,
    pub best_val_acc: f64,
    pub params: Vec<(String, Mat)>,
    pub adam_m: Vec<Mat>,
    pub adam_v: Vec<Mat>,
    pub adam_t: u64,
    /// `(iteration, validation accuracy)` history.
    pub history: Vec<(u64, f64)>,
}

fn write_mat(buf: &mut Vec<u8>, m: &Mat) {
    buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for &v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_mat(buf: &[u8], off: &mut usize) -> Result<Mat> {
    let err = || CoreError::parse("checkpoint", "truncated matrix");
    if buf.len() < *off + 8 {
        return Err(err());
    }
    let rows = u32::from_le_bytes(buf[*off..*off + 4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(buf[*off + 4..*off + 8].try_into().unwrap()) as usize;
    *off += 8;
    let n = rows * cols;
    if buf.len() < *off + n * 8 {
        return Err(err());
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let start = *off + i * 8;
        data.push(f64::from_le_bytes(buf[start..start + 8].try_into().unwrap()));
    }
    *off += n * 8;
    Mat::from_shape_vec((rows, cols), data).map_err(|e| CoreError::parse("checkpoint", e.to_string()))
}

impl Checkpoint {
    pub fn capture(model: &Model, adam: &Adam, config_hash: &str, iteration: u64, best: f64, history: Vec<(u64, f64)>) -> Self {
        let params = model
            .store
            .iter()
            .map(|(name, v)| (name.to_string(), v.to_owned()))
            .collect();
        let (m, v, t) = adam.state();
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            iteration,
            best_val_acc: best,
            params,
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
            adam_t: t,
            history,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        let hash = self.config_hash.as_bytes();
        buf.extend_from_slice(&(hash.len() as u32).to_le_bytes());
        buf.extend_from_slice(hash);
        buf.extend_from_slice(&self.iteration.to_le_bytes());
        buf.extend_from_slice(&self.best_val_acc.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, m) in &self.params {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            buf.extend_from_slice(nb);
            write_mat(&mut buf, m);
        }
        buf.extend_from_slice(&self.adam_t.to_le_bytes());
        for m in self.adam_m.iter().chain(self.adam_v.iter()) {
            write_mat(&mut buf, m);
        }
        let hist = serde_json::to_string(&self.history)
            .map_err(|e| CoreError::parse(path.display().to_string(), e.to_string()))?;
        buf.extend_from_slice(&(hist.len() as u64).to_le_bytes());
        buf.extend_from_slice(hist.as_bytes());
        let mut f = std::fs::File::create(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        f.write_all(&buf).map_err(|e| CoreError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let mut f = std::fs::File::open(path).map_err(|e| CoreError::io(p.clone(), e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| CoreError::io(p.clone(), e))?;
        if buf.len() < 8 || &buf[0..4] != CHECKPOINT_MAGIC {
            return Err(CoreError::parse(p, "bad checkpoint magic"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CoreError::parse(p, format!("unsupported checkpoint version {version}")));
        }
        let mut off = 8usize;
        let hl = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        let config_hash = String::from_utf8(buf[off..off + hl].to_vec())
            .map_err(|e| CoreError::parse(p.clone(), e.to_string()))?;
        off += hl;
        let iteration = u64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
        off += 8;
        let best_val_acc = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
        off += 8;
        let n_params = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let nl = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
            off += 4;
            let name = String::from_utf8(buf[off..off + nl].to_vec())
                .map_err(|e| CoreError::parse(p.clone(), e.to_string()))?;
            off += nl;
            let m = read_mat(&buf, &mut off)?;
            params.push((name, m));
        }
        let adam_t = u64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
        off += 8;
        let mut adam_m = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            adam_m.push(read_mat(&buf, &mut off)?);
        }
        let mut adam_v = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            adam_v.push(read_mat(&buf, &mut off)?);
        }
        let hl = u64::from_le_bytes(buf[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        let history: Vec<(u64, f64)> = serde_json::from_slice(&buf[off..off + hl])
            .map_err(|e| CoreError::parse(p, e.to_string()))?;
        Ok(Self {
            version,
            config_hash,
            iteration,
            best_val_acc,
            params,
            adam_m,
            adam_v,
            adam_t,
            history,
        })
    }

    /// Install parameters (and optimizer state when given) into a model.
    pub fn apply(&self, model: &mut Model, adam: Option<&mut Adam>) -> Result<()> {
        for (name, value) in &self.params {
            let slot = model.store.slot(name).ok_or_else(|| {
                CoreError::Config(format!("checkpoint parameter {name} unknown to this model"))
            })?;
            if model.store.value(slot).shape() != value.shape() {
                return Err(CoreError::Config(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    model.store.value(slot).shape()
                )));
            }
            model.store.set_value(slot, value.clone());
        }
        if let Some(adam) = adam {
            adam.restore(self.adam_m.clone(), self.adam_v.clone(), self.adam_t);
        }
        Ok(())
    }
}

/// Deterministic batch membership: a per-epoch permutation walked cyclically.
pub fn batch_indices(n: usize, batch: usize, iteration: u64, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    assert!(n > 0);
    let start = (iteration as usize * batch) % n;
    let epoch = (iteration as usize * batch) / n;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
        seed ^ fnv1a(format!("epoch:{epoch}").as_bytes()),
    );
    perm.shuffle(&mut rng);
    (0..batch).map(|i| perm[(start + i) % n]).collect()
}

fn gumbel_seed(run_seed: u64, iteration: u64, episode_id: &str) -> u64 {
    fnv1a(format!("gumbel:{run_seed}:{iteration}:{episode_id}").as_bytes())
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub iterations_run: u64,
    pub best_val_acc: f64,
    pub final_loss: f64,
    pub history: Vec<(u64, f64)>,
}

/// Train a model in place on in-memory episodes. When `save_dir` is given,
/// `last.ckpt` is written at every evaluation point and `best.ckpt` whenever
/// validation accuracy improves (best-by-val-Acc selection).
pub fn train_episodes(
    model: &mut Model,
    cfg: &RunConfig,
    train_eps: &[Episode],
    val_eps: &[Episode],
    resume: Option<&Checkpoint>,
    save_dir: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_eps.is_empty() {
        return Err(CoreError::Validation("empty training split".into()));
    }
    let config_hash = cfg.hash();
    let mut adam = Adam::new(&model.store);
    let mut start_iter = 0u64;
    let mut best = f64::NEG_INFINITY;
    let mut history: Vec<(u64, f64)> = Vec::new();
    if let Some(ck) = resume {
        if ck.config_hash != config_hash {
            return Err(CoreError::Config(format!(
                "checkpoint config hash {} does not match run config {}",
                ck.config_hash, config_hash
            )));
        }
        ck.apply(model, Some(&mut adam))?;
        start_iter = ck.iteration;
        best = ck.best_val_acc;
        history = ck.history.clone();
    }

    let opt = &cfg.optimizer;
    let mut final_loss = f64::NAN;
    let mut iterations_run = start_iter;
    for iter in start_iter..opt.max_iterations {
        let idx = batch_indices(train_eps.len(), opt.batch_size, iter, cfg.seed);
        let results: Vec<Result<(Vec<Option<Mat>>, crate::pipeline::LossParts)>> = idx
            .par_iter()
            .map(|&i| {
                let ep = &train_eps[i];
                let mut tape = crate::tensor::Tape::new();
                let (loss, parts) =
                    model.forward_train(&mut tape, ep, gumbel_seed(cfg.seed, iter, &ep.id))?;
                let grads = tape.backward(loss, model.store.len());
                Ok((grads.by_param, parts))
            })
            .collect();

        let mut summed: Vec<Option<Mat>> = vec![None; model.store.len()];
        let mut total = 0.0;
        let mut bce = 0.0;
        let mut cons = 0.0;
        let mut unanswerable = 0usize;
        let inv = 1.0 / idx.len() as f64;
        for r in results {
            let (grads, parts) = r?;
            total += parts.total * inv;
            bce += parts.bce * inv;
            cons += parts.cons * inv;
            unanswerable += usize::from(parts.unanswerable);
            for (slot, g) in grads.into_iter().enumerate() {
                if let Some(g) = g {
                    match &mut summed[slot] {
                        Some(acc) => *acc += &g,
                        entry => *entry = Some(g),
                    }
                }
            }
        }
        for g in summed.iter_mut().flatten() {
            *g *= inv;
        }
        if opt.clip_norm > 0.0 {
            let norm: f64 = summed
                .iter()
                .flatten()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > opt.clip_norm {
                let scale = opt.clip_norm / norm;
                for g in summed.iter_mut().flatten() {
                    *g *= scale;
                }
            }
        }
        if !total.is_finite() {
            return Err(CoreError::Runtime(format!(
                "training diverged at iteration {iter}: loss={total} bce={bce} cons={cons}"
            )));
        }
        adam.step(&mut model.store, &summed, opt.lr_at(iter))?;
        final_loss = total;
        iterations_run = iter + 1;
        if opt.log_every > 0 && iter % opt.log_every == 0 {
            println!(
                "iter {iter:>6}  loss {total:>10.6}  bce {bce:>10.6}  cons {cons:>10.6}  miss {}/{}  lr {:.2e}",
                unanswerable,
                idx.len(),
                opt.lr_at(iter)
            );
        }

        let at_eval = opt.eval_every > 0 && (iter + 1) % opt.eval_every == 0;
        let last = iter + 1 == opt.max_iterations;
        if (at_eval || last) && !val_eps.is_empty() {
            let (report, _) = evaluate_episodes(model, val_eps, (1, 1), &metrics::DEFAULT_TAUS)?;
            history.push((iter + 1, report.acc));
            if opt.log_every > 0 {
                println!("iter {:>6}  val acc {:.2}", iter + 1, report.acc);
            }
            let improved = report.acc > best;
            if improved {
                best = report.acc;
            }
            if let Some(dir) = save_dir {
                let ck = Checkpoint::capture(model, &adam, &config_hash, iter + 1, best, history.clone());
                ck.save(&dir.join("last.ckpt"))?;
                if improved {
                    ck.save(&dir.join("best.ckpt"))?;
                }
            }
            if let Some(stop) = opt.early_stop_val_acc {
                if best >= stop {
                    break;
                }
            }
        }
    }
    Ok(TrainSummary {
        iterations_run,
        best_val_acc: best,
        final_loss,
        history,
    })
}

/// Run deterministic inference over a split. Annotations are stripped before
/// prediction (inference must not read them); they are used afterwards to
/// build the ground-truth table for metrics.
pub fn evaluate_episodes(
    model: &Model,
    episodes: &[Episode],
    regime: (usize, usize),
    taus: &[f64],
) -> Result<(MetricReport, BTreeMap<String, (String, GroundingResult)>)> {
    let outputs: Vec<Result<(String, PredictOutput)>> = episodes
        .par_iter()
        .map(|ep| {
            let out = model.predict(&ep.without_annotation())?;
            Ok((ep.id.clone(), out))
        })
        .collect();
    let mut preds = BTreeMap::new();
    let mut results = BTreeMap::new();
    for r in outputs {
        let (id, out) = r?;
        preds.insert(id.clone(), Prediction::from_result(&out.answer, &out.grounding));
        results.insert(id, (out.answer, out.grounding));
    }
    let mut gts = BTreeMap::new();
    for ep in episodes {
        let ann = ep.annotation.as_ref().ok_or_else(|| {
            CoreError::Validation(format!("episode {} lacks an annotation for evaluation", ep.id))
        })?;
        gts.insert(
            ep.id.clone(),
            AnnotatedEpisode::from_annotation(&ep.id, &ep.question, &ep.answers, ann),
        );
    }
    let report = metrics::evaluate(&preds, &gts, regime, taus)?;
    Ok((report, results))
}

/// Load the standard split layout rooted at `data_dir`.
pub fn load_dataset(data_dir: &Path) -> Result<(Vec<Episode>, Vec<Episode>, Vec<Episode>, Vocab)> {
    let train = synth::load_split(&data_dir.join("train"))?;
    let val = synth::load_split(&data_dir.join("val"))?;
    let test = synth::load_split(&data_dir.join("test"))?;
    let vocab = Vocab::load(&data_dir.join("vocab.txt"))?;
    Ok((train, val, test, vocab))
}
