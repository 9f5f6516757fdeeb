//! Optimization: Adam with global-norm clipping, KL warm-up, the epoch loop
//! with early stopping, and LGVC checkpoints.
//!
//! All randomness is keyed by `(seed, step, trial)`, so a run resumed from
//! a checkpoint continues exactly as an uninterrupted one would.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ByteReader, Trial};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{model_card, Batch, BatchMode, LangevinFlow, LossParts, ModelConfig};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

/// Consecutive skipped (non-finite) steps tolerated before aborting.
pub const MAX_CONSECUTIVE_SKIPS: u32 = 10;

/// Trials per independent tape when a batch is split across workers. Fixed,
/// so results do not depend on the worker count.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay per epoch from `learning_rate` to this fraction of it,
    /// reached at epoch `lr_decay_epochs`; 1 keeps the rate constant.
    pub lr_final_fraction: f64,
    /// Length of the decay. Independent of `epochs`, so stopping a run
    /// early does not change its schedule.
    pub lr_decay_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Epochs without a strict co-bps improvement before stopping.
    pub patience: usize,
    /// Epochs between `last.lgvc` checkpoints.
    pub checkpoint_interval: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<u64>,
    pub init_readout_bias: bool,
    /// Worker threads; `LANGEVIN_THREADS` or the rayon default when unset.
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-2,
            lr_final_fraction: 0.1,
            lr_decay_epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 200.0,
            patience: 20,
            checkpoint_interval: 1,
            max_steps: None,
            init_readout_bias: true,
            threads: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.patience == 0
            || self.checkpoint_interval == 0
            || self.lr_decay_epochs == 0
        {
            return Err(Error::config(
                "epochs, batch_size, patience, checkpoint_interval and lr_decay_epochs must be positive",
            ));
        }
        if !(self.learning_rate >= 0.0 && self.clip_norm > 0.0 && self.eps > 0.0) {
            return Err(Error::config("learning_rate must be non-negative, clip_norm and eps positive"));
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return Err(Error::config("lr_final_fraction must lie in (0, 1]"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Learning rate for 0-based `epoch`: cosine from `lr` down to
/// `lr · final_fraction` at epoch `horizon − 1`, constant afterwards.
pub fn lr_schedule(epoch: u64, horizon: usize, lr: f64, final_fraction: f64) -> f64 {
    if horizon <= 1 {
        return lr * final_fraction;
    }
    let x = (epoch as f64 / (horizon - 1) as f64).min(1.0);
    let low = lr * final_fraction;
    low + (lr - low) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// `λ · min(1, step / warmup)`.
pub fn kl_schedule(step: u64, lambda_max: f64, warmup: usize) -> f64 {
    if warmup == 0 {
        return lambda_max;
    }
    lambda_max * (step as f64 / warmup as f64).min(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Applied updates (drives bias correction).
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub consecutive_skips: u32,
    pub total_skips: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    /// Update applied; raw gradient norm before clipping.
    Applied { grad_norm: f64 },
    Skipped,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor], cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            clip_norm: cfg.clip_norm,
            consecutive_skips: 0,
            total_skips: 0,
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Clips `grads` to global norm `clip_norm` in place; returns the raw norm.
pub fn clip_gradients(grads: &mut [Tensor], clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = clip_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// Bias-corrected Adam after global-norm clipping. Non-finite gradients
/// skip the update; too many consecutive skips abort.
pub fn adam_step(params: &mut [&mut Tensor], mut grads: Vec<Tensor>, st: &mut OptimizerState) -> Result<StepOutcome> {
    if params.len() != grads.len() || params.len() != st.m.len() {
        return Err(Error::dim("parameters, gradients and moments are misaligned"));
    }
    for ((p, g), m) in params.iter().zip(&grads).zip(&st.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim(format!("shape mismatch {:?} / {:?}", p.shape(), g.shape())));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        st.consecutive_skips += 1;
        st.total_skips += 1;
        warn!("non-finite gradient, skipping step ({} in a row)", st.consecutive_skips);
        if st.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
            return Err(Error::Training(format!(
                "{} consecutive non-finite gradients",
                st.consecutive_skips
            )));
        }
        return Ok(StepOutcome::Skipped);
    }
    st.consecutive_skips = 0;
    let grad_norm = clip_gradients(&mut grads, st.clip_norm);
    st.step += 1;
    let t = st.step as i32;
    let c1 = 1.0 - st.beta1.powi(t);
    let c2 = 1.0 - st.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (st.m[i].data_mut(), st.v[i].data_mut(), grads[i].data());
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            m[k] = st.beta1 * m[k] + (1.0 - st.beta1) * g[k];
            v[k] = st.beta2 * v[k] + (1.0 - st.beta2) * g[k] * g[k];
            *x -= st.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + st.eps);
        }
    }
    Ok(StepOutcome::Applied { grad_norm })
}

/// Progress that is not part of the model or optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: u64,
    /// Batches processed, including skipped ones.
    pub step: u64,
    pub best_co_bps: f64,
    pub best_epoch: u64,
    pub epochs_since_best: u64,
}

impl Default for TrainState {
    fn default() -> Self {
        Self {
            epoch: 0,
            step: 0,
            best_co_bps: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_nll: f64,
    pub val_co_bps: f64,
    pub lambda: f64,
}

pub const LOG_HEADER: &str = "epoch\ttrain_loss\tval_nll\tval_co_bps\tlambda";

impl LogRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.epoch, self.train_loss, self.val_nll, self.val_co_bps, self.lambda
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: LangevinFlow,
    pub train_config: TrainConfig,
    pub optimizer: OptimizerState,
    pub state: TrainState,
}

pub const LGVC_MAGIC: &[u8; 4] = b"LGVC";
pub const LGVC_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut ByteReader) -> Result<String> {
    let n = r.u32()? as usize;
    let at = r.offset();
    String::from_utf8(r.bytes(n)?.to_vec()).map_err(|_| Error::Format {
        offset: at,
        msg: "invalid UTF-8".into(),
    })
}

impl Checkpoint {
    /// LGVC layout (little-endian): magic, u32 version, u64 model-config
    /// hash, model and train config as JSON strings, training state,
    /// parameters as (name, shape, f64 payload), then optimizer scalars and
    /// both moment buffers.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LGVC_MAGIC);
        put_u32(&mut out, LGVC_VERSION);
        put_u64(&mut out, self.model.config.hash());
        put_str(&mut out, &serde_json::to_string(&self.model.config).expect("config json"));
        put_str(&mut out, &serde_json::to_string(&self.train_config).expect("config json"));
        let s = &self.state;
        put_u64(&mut out, s.epoch);
        put_u64(&mut out, s.step);
        put_f64s(&mut out, &[s.best_co_bps]);
        put_u64(&mut out, s.best_epoch);
        put_u64(&mut out, s.epochs_since_best);
        let params = self.model.params();
        put_u32(&mut out, params.len() as u32);
        for (name, t) in &params {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f64s(&mut out, t.data());
        }
        let o = &self.optimizer;
        put_f64s(&mut out, &[o.lr, o.beta1, o.beta2, o.eps, o.clip_norm]);
        put_u64(&mut out, o.step);
        put_u32(&mut out, o.consecutive_skips);
        put_u64(&mut out, o.total_skips);
        for t in o.m.iter().chain(&o.v) {
            put_f64s(&mut out, t.data());
        }
        out
    }

    /// Decodes and checks the stored hash against the embedded config.
    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.bytes(4)? != LGVC_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected LGVC".into(),
            });
        }
        let version = r.u32()?;
        if version != LGVC_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let hash = r.u64()?;
        let at = r.offset();
        let config: ModelConfig = serde_json::from_str(&get_str(&mut r)?).map_err(|e| Error::Format {
            offset: at,
            msg: format!("model config: {e}"),
        })?;
        if config.hash() != hash {
            return Err(Error::HashMismatch {
                expected: hash,
                found: config.hash(),
            });
        }
        let at = r.offset();
        let train_config: TrainConfig = serde_json::from_str(&get_str(&mut r)?).map_err(|e| Error::Format {
            offset: at,
            msg: format!("train config: {e}"),
        })?;
        let state = TrainState {
            epoch: r.u64()?,
            step: r.u64()?,
            best_co_bps: r.f64s(1)?[0],
            best_epoch: r.u64()?,
            epochs_since_best: r.u64()?,
        };
        let mut model = LangevinFlow::new(config)?;
        let n = r.u32()? as usize;
        let expected: Vec<(String, Vec<usize>)> =
            model.params().into_iter().map(|(k, t)| (k, t.shape().to_vec())).collect();
        if n != expected.len() {
            return r.fail(format!("{n} parameter blobs, model has {}", expected.len()));
        }
        let mut shapes = Vec::with_capacity(n);
        for (i, (want_name, want_shape)) in expected.iter().enumerate() {
            let at = r.offset();
            let name = get_str(&mut r)?;
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if &name != want_name || &shape != want_shape {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("blob `{name}` {shape:?}, expected `{want_name}` {want_shape:?}"),
                });
            }
            let len = shape.iter().product();
            let data = r.f64s(len)?;
            model.params_mut()[i].data_mut().copy_from_slice(&data);
            shapes.push(shape);
        }
        let s = r.f64s(5)?;
        let step = r.u64()?;
        let consecutive_skips = r.u32()?;
        let total_skips = r.u64()?;
        let read_moments = |r: &mut ByteReader| -> Result<Vec<Tensor>> {
            shapes
                .iter()
                .map(|sh| Tensor::new(sh.clone(), r.f64s(sh.iter().product())?))
                .collect()
        };
        let m = read_moments(&mut r)?;
        let v = read_moments(&mut r)?;
        if !r.at_end() {
            return r.fail("trailing bytes after checkpoint");
        }
        Ok(Self {
            model,
            train_config,
            optimizer: OptimizerState {
                m,
                v,
                step,
                lr: s[0],
                beta1: s[1],
                beta2: s[2],
                eps: s[3],
                clip_norm: s[4],
                consecutive_skips,
                total_skips,
            },
            state,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("lgvc.tmp");
    fs::write(&tmp, ckpt.encode()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and insists that its model config hashes to `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let found = ckpt.model.config.hash();
    if found != expected.hash() {
        return Err(Error::HashMismatch {
            expected: expected.hash(),
            found,
        });
    }
    Ok(ckpt)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub parts: LossParts,
    pub lambda: f64,
    pub outcome: StepOutcome,
}

/// Runs the training loop; owns the model, optimizer and progress.
#[derive(Debug)]
pub struct Trainer {
    pub model: LangevinFlow,
    pub optimizer: OptimizerState,
    pub state: TrainState,
    pub config: TrainConfig,
    pub log: Vec<LogRow>,
    pub best: Option<LangevinFlow>,
    pool: rayon::ThreadPool,
}

fn threads(cfg: &TrainConfig) -> usize {
    cfg.threads
        .or_else(|| std::env::var("LANGEVIN_THREADS").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(0)
}

fn build_pool(cfg: &TrainConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads(cfg))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

impl Trainer {
    pub fn new(model: LangevinFlow, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(&model.params().into_iter().map(|(_, t)| t).collect::<Vec<_>>(), &config);
        Ok(Self {
            pool: build_pool(&config)?,
            model,
            optimizer,
            state: TrainState::default(),
            config,
            log: Vec::new(),
            best: None,
        })
    }

    /// Continues from a checkpoint. `config` replaces the stored train config
    /// (e.g. to extend `epochs`) but keeps the stored optimizer state.
    pub fn resume(ckpt: Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let config = config.unwrap_or(ckpt.train_config);
        config.validate()?;
        Ok(Self {
            pool: build_pool(&config)?,
            best: Some(ckpt.model.clone()),
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            state: ckpt.state,
            config,
            log: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train_config: self.config.clone(),
            optimizer: self.optimizer.clone(),
            state: self.state.clone(),
        }
    }

    pub fn lambda(&self) -> f64 {
        let c = &self.model.config;
        kl_schedule(self.state.step, c.kl_weight_max, c.kl_warmup_steps)
    }

    /// Loss and summed gradients for the trials at `idx`, split into
    /// fixed-size chunks evaluated on separate tapes.
    pub fn batch_gradients(&self, trials: &[Trial], idx: &[usize], lambda: f64) -> Result<(LossParts, Vec<Tensor>)> {
        let step = self.state.step;
        let seed = self.config.seed;
        let mode = BatchMode::train(&self.model.config, seed, step);
        let chunks: Vec<&[usize]> = idx.chunks(CHUNK).collect();
        let model = &self.model;
        let results: Vec<Result<(LossParts, Vec<Tensor>)>> = self.pool.install(|| {
            chunks
                .par_iter()
                .map(|chunk| {
                    let refs: Vec<&Trial> = chunk.iter().map(|&i| &trials[i]).collect();
                    let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
                    let batch = Batch::new(&refs, &ids, mode)?;
                    model.loss_and_grads(&batch, lambda, &mut batch.noise(seed, step))
                })
                .collect()
        });
        let total = idx.len() as f64;
        let mut parts = LossParts {
            loss: 0.0,
            nll: 0.0,
            kl: 0.0,
        };
        let mut grads: Option<Vec<Tensor>> = None;
        for (chunk, res) in chunks.iter().zip(results) {
            let (p, g) = res?;
            let w = chunk.len() as f64 / total;
            parts.loss += w * p.loss;
            parts.nll += w * p.nll;
            parts.kl += w * p.kl;
            match &mut grads {
                None => {
                    grads = Some(
                        g.into_iter()
                            .map(|mut t| {
                                t.data_mut().iter_mut().for_each(|x| *x *= w);
                                t
                            })
                            .collect(),
                    )
                }
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += w * y);
                    }
                }
            }
        }
        Ok((parts, grads.ok_or_else(|| Error::Contract("empty batch".into()))?))
    }

    pub fn train_step(&mut self, trials: &[Trial], idx: &[usize]) -> Result<StepReport> {
        let lambda = self.lambda();
        let (parts, grads) = self.batch_gradients(trials, idx, lambda).map_err(|e| match e {
            Error::Numeric { step, msg } => Error::Training(format!(
                "batch {} (trials {:?}): {msg} at rollout step {step}",
                self.state.step, idx
            )),
            other => other,
        })?;
        if !parts.loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {} on batch {} (trials {:?}, nll {}, kl {})",
                parts.loss, self.state.step, idx, parts.nll, parts.kl
            )));
        }
        let mut params = self.model.params_mut();
        let outcome = adam_step(&mut params, grads, &mut self.optimizer)?;
        self.state.step += 1;
        Ok(StepReport { parts, lambda, outcome })
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(self.config.seed, Stream::Shuffle, self.state.epoch, 0));
        order
    }

    fn steps_exhausted(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// One pass over the training set plus validation. Returns the log row.
    pub fn run_epoch(&mut self, train: &[Trial], val: &[Trial]) -> Result<LogRow> {
        let c = &self.config;
        self.optimizer.lr = lr_schedule(self.state.epoch, c.lr_decay_epochs, c.learning_rate, c.lr_final_fraction);
        let order = self.epoch_order(train.len());
        let (mut loss, mut batches) = (0.0, 0usize);
        for idx in order.chunks(self.config.batch_size) {
            if self.steps_exhausted() {
                break;
            }
            let r = self.train_step(train, idx)?;
            loss += r.parts.loss;
            batches += 1;
        }
        self.state.epoch += 1;
        let (val_nll, co) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let rates = metrics::predicted_rates(&self.model, val)?;
            let nll = rates
                .iter()
                .zip(val)
                .map(|(r, t)| crate::model::poisson_nll(r.data(), t.spikes.data(), None))
                .sum::<Result<f64>>()?
                / val.len() as f64;
            (nll, metrics::co_bps(&rates, val)?)
        };
        if co > self.state.best_co_bps || (self.best.is_none() && !co.is_nan()) {
            self.state.best_co_bps = co;
            self.state.best_epoch = self.state.epoch;
            self.state.epochs_since_best = 0;
            self.best = Some(self.model.clone());
        } else {
            self.state.epochs_since_best += 1;
        }
        let row = LogRow {
            epoch: self.state.epoch,
            train_loss: if batches > 0 { loss / batches as f64 } else { f64::NAN },
            val_nll,
            val_co_bps: co,
            lambda: self.lambda(),
        };
        self.log.push(row);
        Ok(row)
    }

    /// Epoch loop with early stopping. With `out`, writes `train_log.tsv`
    /// (appending when resuming), `last.lgvc`, `best.lgvc` and
    /// `model_card.txt`.
    pub fn fit(&mut self, train: &[Trial], val: &[Trial], out: Option<&Path>) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        if self.state.step == 0 && self.config.init_readout_bias {
            self.model.init_readout_bias(train);
        }
        let mut log_file = match out {
            Some(dir) => Some(open_log(dir, self.state.epoch == 0)?),
            None => None,
        };
        if let Some(dir) = out {
            let card = dir.join("model_card.txt");
            fs::write(&card, model_card(&self.model.config)).map_err(|e| Error::io(card, e))?;
        }
        while (self.state.epoch as usize) < self.config.epochs && !self.steps_exhausted() {
            let row = self.run_epoch(train, val)?;
            info!(
                "epoch {} loss {:.4} val_nll {:.4} co_bps {:.4} lambda {:.3}",
                row.epoch, row.train_loss, row.val_nll, row.val_co_bps, row.lambda
            );
            if let (Some(dir), Some((path, f))) = (out, log_file.as_mut()) {
                writeln!(f, "{}", row.to_tsv()).map_err(|e| Error::io(path.as_path(), e))?;
                if self.state.epoch % self.config.checkpoint_interval as u64 == 0 {
                    save_checkpoint(dir.join("last.lgvc"), &self.checkpoint())?;
                }
                if self.state.best_epoch == self.state.epoch {
                    save_checkpoint(dir.join("best.lgvc"), &self.checkpoint())?;
                }
            }
            if self.state.epochs_since_best >= self.config.patience as u64 {
                info!("early stop after epoch {}", self.state.epoch);
                break;
            }
        }
        if let Some(dir) = out {
            save_checkpoint(dir.join("last.lgvc"), &self.checkpoint())?;
        }
        Ok(())
    }

    pub fn best_model(&self) -> &LangevinFlow {
        self.best.as_ref().unwrap_or(&self.model)
    }
}

fn open_log(dir: &Path, fresh: bool) -> Result<(PathBuf, fs::File)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("train_log.tsv");
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    if fresh {
        writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
    }
    Ok((path, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model() -> LangevinFlow {
        LangevinFlow::new(ModelConfig {
            n_neurons: 4,
            n_inputs: 3,
            latent_dim: 4,
            hidden_dim: 6,
            model_dim: 8,
            groups: 2,
            kernel_size: 3,
            forward_mask_bins: 1,
            kl_warmup_steps: 10,
            variant: Variant::Full,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn toy_trials(n: usize, seed: u64) -> Vec<Trial> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let s: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(0..3) as f64).collect();
                Trial::new(Tensor::matrix(5, 4, s).unwrap(), vec![3], if i % 2 == 0 { 0 } else { 1 }).unwrap()
            })
            .collect()
    }

    fn opt_for(params: &[Tensor], lr: f64, clip: f64) -> OptimizerState {
        let refs: Vec<&Tensor> = params.iter().collect();
        OptimizerState::new(
            &refs,
            &TrainConfig {
                learning_rate: lr,
                clip_norm: clip,
                ..TrainConfig::default()
            },
        )
    }

    #[test]
    fn schedule_values() {
        assert_eq!(kl_schedule(0, 2.0, 100), 0.0);
        assert_eq!(kl_schedule(50, 2.0, 100), 1.0);
        assert_eq!(kl_schedule(100, 2.0, 100), 2.0);
        assert_eq!(kl_schedule(1000, 2.0, 100), 2.0);
        assert_eq!(kl_schedule(0, 2.0, 0), 2.0);
    }

    #[test]
    fn lr_schedule_endpoints() {
        assert_eq!(lr_schedule(0, 10, 1.0, 0.1), 1.0);
        assert!((lr_schedule(9, 10, 1.0, 0.1) - 0.1).abs() < 1e-15);
        assert!((lr_schedule(1, 3, 1.0, 0.2) - 0.6).abs() < 1e-15);
        assert_eq!(lr_schedule(5, 10, 0.5, 1.0), 0.5);
        assert!((lr_schedule(30, 10, 1.0, 0.1) - 0.1).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn schedule_monotone_and_bounded(a in 0u64..10_000, b in 0u64..10_000, w in 1usize..5000) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(kl_schedule(lo, 1.5, w) <= kl_schedule(hi, 1.5, w));
            prop_assert!(kl_schedule(hi, 1.5, w) <= 1.5);
        }

        #[test]
        fn clipped_norm_bounded(g in prop::collection::vec(-100.0..100.0f64, 1..40), c in 0.1..50.0f64) {
            let mut grads = vec![Tensor::vector(g)];
            clip_gradients(&mut grads, c);
            prop_assert!(global_norm(&grads) <= c + 1e-9);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut st = opt_for(std::slice::from_ref(&p), 0.1, 10.0);
        st.m[0] = Tensor::vector(vec![0.5, 0.5]);
        adam_step(&mut [&mut p], vec![Tensor::vector(vec![0.0, 0.0])], &mut st).unwrap();
        assert_eq!(st.m[0].data(), &[0.45, 0.45]);
        // the stored first moment still moves the parameter; a fresh
        // optimizer with zero moments does not
        let mut q = Tensor::vector(vec![1.0, -2.0]);
        let mut st = opt_for(std::slice::from_ref(&q), 0.1, 10.0);
        adam_step(&mut [&mut q], vec![Tensor::vector(vec![0.0, 0.0])], &mut st).unwrap();
        assert_eq!(q.data(), &[1.0, -2.0]);
        assert!(p.data()[0] < 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let mut st = opt_for(std::slice::from_ref(&p), 0.01, 1e9);
        adam_step(&mut [&mut p], vec![Tensor::vector(vec![3.0, -0.5, 1e-3])], &mut st).unwrap();
        for (x, s) in p.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - (1.0 + 0.01 * s)).abs() < 1e-7, "{x}");
        }
    }

    #[test]
    fn clipping_scales_to_clip_norm() {
        let mut g = vec![Tensor::vector(vec![6.0, 8.0])];
        assert_eq!(clip_gradients(&mut g, 1.0), 10.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradients_skip_then_abort() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut st = opt_for(std::slice::from_ref(&p), 0.1, 1.0);
        for i in 1..MAX_CONSECUTIVE_SKIPS {
            let o = adam_step(&mut [&mut p], vec![Tensor::vector(vec![f64::NAN])], &mut st).unwrap();
            assert_eq!(o, StepOutcome::Skipped);
            assert_eq!(st.consecutive_skips, i);
        }
        assert_eq!(p.data(), &[1.0]);
        let r = adam_step(&mut [&mut p], vec![Tensor::vector(vec![f64::INFINITY])], &mut st);
        assert!(matches!(r, Err(Error::Training(_))));
    }

    #[test]
    fn loss_decreases_over_fifty_steps() {
        let mut t = Trainer::new(
            toy_model(),
            TrainConfig {
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let trials = toy_trials(8, 1);
        let idx: Vec<usize> = (0..8).collect();
        // compare the likelihood at a fixed step so dropout masks match
        let eval = |m: &LangevinFlow| {
            let refs: Vec<&Trial> = trials.iter().collect();
            let ids: Vec<u64> = (0..8).collect();
            let b = Batch::new(&refs, &ids, BatchMode::train(&m.config, 0, 0)).unwrap();
            m.loss_value(&b, 0.0, &mut b.noise(0, 0)).unwrap().nll
        };
        let before = eval(&t.model);
        for _ in 0..50 {
            t.train_step(&trials, &idx).unwrap();
        }
        assert!(eval(&t.model) < before);
    }

    #[test]
    fn frozen_parameters_stop_after_two_epochs() {
        let mut t = Trainer::new(
            toy_model(),
            TrainConfig {
                learning_rate: 0.0,
                patience: 1,
                epochs: 20,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let train = toy_trials(6, 2);
        let val = toy_trials(4, 3);
        t.fit(&train, &val, None).unwrap();
        assert_eq!(t.state.epoch, 2);
    }

    #[test]
    fn chunking_and_threads_do_not_change_results() {
        let trials = toy_trials(20, 4);
        let idx: Vec<usize> = (0..20).collect();
        let run = |threads: usize| {
            let mut t = Trainer::new(
                toy_model(),
                TrainConfig {
                    threads: Some(threads),
                    ..TrainConfig::default()
                },
            )
            .unwrap();
            t.train_step(&trials, &idx).unwrap();
            t.model
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let train = toy_trials(10, 5);
        let val = toy_trials(4, 6);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 3,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut straight = Trainer::new(toy_model(), cfg.clone()).unwrap();
        straight.fit(&train, &val, None).unwrap();

        let mut first = Trainer::new(toy_model(), TrainConfig { epochs: 2, ..cfg.clone() }).unwrap();
        first.fit(&train, &val, None).unwrap();
        let bytes = first.checkpoint().encode();
        let ckpt = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ckpt, first.checkpoint());
        let mut resumed = Trainer::resume(ckpt, Some(cfg)).unwrap();
        resumed.fit(&train, &val, None).unwrap();
        assert_eq!(resumed.model, straight.model);
        assert_eq!(resumed.optimizer, straight.optimizer);
        assert_eq!(resumed.log[..], straight.log[2..]);
    }

    #[test]
    fn checkpoint_rejections() {
        let t = Trainer::new(toy_model(), TrainConfig::default()).unwrap();
        let bytes = t.checkpoint().encode();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), t.checkpoint());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[8] ^= 1;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::HashMismatch { .. })));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.lgvc");
        save_checkpoint(&path, &t.checkpoint()).unwrap();
        let other = ModelConfig { gamma: 0.6, ..t.model.config.clone() };
        assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::HashMismatch { .. })));
        assert!(load_checkpoint_for(&path, &t.model.config).is_ok());
    }

    #[test]
    fn fit_writes_artifacts_and_is_deterministic() {
        let train = toy_trials(8, 7);
        let val = toy_trials(4, 8);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let logs: Vec<String> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                let mut t = Trainer::new(toy_model(), cfg.clone()).unwrap();
                t.fit(&train, &val, Some(dir.path())).unwrap();
                for f in ["best.lgvc", "last.lgvc", "model_card.txt"] {
                    assert!(dir.path().join(f).exists(), "{f}");
                }
                fs::read_to_string(dir.path().join("train_log.tsv")).unwrap()
            })
            .collect();
        assert_eq!(logs[0], logs[1]);
        assert_eq!(logs[0].lines().count(), 4);
        assert_eq!(logs[0].lines().next().unwrap(), LOG_HEADER);
    }
}
