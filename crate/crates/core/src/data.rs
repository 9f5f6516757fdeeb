//! Synthetic Lorenz spiking data, trial containers and the LGVF file format.
//!
//! A dataset is a set of conditions, each a Lorenz trajectory started from
//! its own random point on the attractor. Every trial of a condition shares
//! the condition's firing rates and gets an independent Poisson draw.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

/// Divergence threshold for the integrator.
const DIVERGED: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorenzConfig {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt_ode: f64,
    pub burn_in: usize,
    /// Integrator steps between consecutive bins.
    pub steps_per_bin: usize,
    /// Index of the last bin; trials have `n_steps + 1` bins.
    pub n_steps: usize,
    pub n_trials: usize,
    pub n_conditions: usize,
    pub n_neurons: usize,
    /// Target mean spike count per bin.
    pub rate_scale: f64,
    pub held_out_fraction: f64,
    pub forward_fraction: f64,
    /// Every `val_every`-th trial (index `% val_every == val_every − 1`)
    /// goes to validation.
    pub val_every: usize,
    pub seed: u64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt_ode: 0.01,
            burn_in: 500,
            steps_per_bin: 2,
            n_steps: 49,
            n_trials: 1300,
            n_conditions: 65,
            n_neurons: 29,
            rate_scale: 0.3,
            held_out_fraction: 0.25,
            forward_fraction: 0.25,
            val_every: 5,
            seed: 0,
        }
    }
}

impl LorenzConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma", self.sigma),
            ("beta", self.beta),
            ("dt_ode", self.dt_ode),
            ("rate_scale", self.rate_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.rho.is_finite() {
            return Err(Error::config("rho must be finite"));
        }
        if self.n_neurons < 3 {
            return Err(Error::config(format!("n_neurons must be at least 3, got {}", self.n_neurons)));
        }
        if self.n_trials < 2 {
            return Err(Error::config(format!("n_trials must be at least 2, got {}", self.n_trials)));
        }
        if self.n_conditions == 0 || self.n_conditions > self.n_trials {
            return Err(Error::config(format!(
                "n_conditions must lie in [1, n_trials], got {}",
                self.n_conditions
            )));
        }
        if self.steps_per_bin == 0 {
            return Err(Error::config("steps_per_bin must be positive"));
        }
        for (name, f) in [("held_out_fraction", self.held_out_fraction), ("forward_fraction", self.forward_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {f}")));
            }
        }
        if self.val_every < 2 {
            return Err(Error::config("val_every must be at least 2"));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_steps + 1
    }

    pub fn n_held_out(&self) -> usize {
        (self.n_neurons as f64 * self.held_out_fraction).floor() as usize
    }

    pub fn n_forward(&self) -> usize {
        (self.n_bins() as f64 * self.forward_fraction).floor() as usize
    }

    pub fn condition_of(&self, trial: usize) -> usize {
        trial * self.n_conditions / self.n_trials
    }
}

/// `dy/dt` of the Lorenz system.
pub fn lorenz_derivative(y: [f64; 3], sigma: f64, rho: f64, beta: f64) -> [f64; 3] {
    [sigma * (y[1] - y[0]), y[0] * (rho - y[2]) - y[1], y[0] * y[1] - beta * y[2]]
}

fn rk4(y: [f64; 3], dt: f64, cfg: &LorenzConfig) -> [f64; 3] {
    let f = |y: [f64; 3]| lorenz_derivative(y, cfg.sigma, cfg.rho, cfg.beta);
    let add = |a: [f64; 3], b: [f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
    let k1 = f(y);
    let k2 = f(add(y, k1, dt / 2.0));
    let k3 = f(add(y, k2, dt / 2.0));
    let k4 = f(add(y, k3, dt));
    std::array::from_fn(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Integrates from `initial`, discards `burn_in` steps and returns
/// `n_steps + 1` states spaced `steps_per_bin` integrator steps apart.
pub fn lorenz_trajectory(cfg: &LorenzConfig, initial: [f64; 3]) -> Result<Tensor> {
    if initial.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("initial state is not finite".into()));
    }
    let mut y = initial;
    let mut step = 0usize;
    let mut advance = |y: &mut [f64; 3]| -> Result<()> {
        *y = rk4(*y, cfg.dt_ode, cfg);
        step += 1;
        if y.iter().any(|v| !v.is_finite() || v.abs() > DIVERGED) {
            return Err(Error::Numeric {
                step,
                msg: "Lorenz integration diverged".into(),
            });
        }
        Ok(())
    };
    for _ in 0..cfg.burn_in {
        advance(&mut y)?;
    }
    let mut out = Vec::with_capacity(cfg.n_bins() * 3);
    out.extend_from_slice(&y);
    for _ in 0..cfg.n_steps {
        for _ in 0..cfg.steps_per_bin {
            advance(&mut y)?;
        }
        out.extend_from_slice(&y);
    }
    Tensor::matrix(cfg.n_bins(), 3, out)
}

/// Random projection from standardized states to firing rates.
#[derive(Clone, Debug, PartialEq)]
pub struct RateProjection {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// `3 × n_neurons`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl RateProjection {
    /// Fits standardization and bias calibration to `states` (a stack of
    /// `bins × 3` trajectories) so every neuron's mean rate over them is
    /// `rate_scale`.
    pub fn fit(states: &[Tensor], n_neurons: usize, rate_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let rows: Vec<&[f64]> = states.iter().flat_map(|s| (0..s.rows()).map(move |r| s.row(r))).collect();
        if rows.is_empty() {
            return Err(Error::Data("no states to project".into()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let scale = 1.0 / 3f64.sqrt();
        let w: Vec<f64> = (0..3 * n_neurons).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
        let weights = Tensor::matrix(3, n_neurons, w)?;
        let mut proj = Self {
            mean,
            std,
            weights,
            bias: vec![0.0; n_neurons],
        };
        let mut sums = vec![0.0; n_neurons];
        for r in &rows {
            for (j, l) in proj.log_rates(r).into_iter().enumerate() {
                sums[j] += l.exp();
            }
        }
        proj.bias = sums.iter().map(|s| rate_scale.ln() - (s / n).ln()).collect();
        Ok(proj)
    }

    fn log_rates(&self, state: &[f64]) -> Vec<f64> {
        let s: Vec<f64> = (0..3).map(|c| (state[c] - self.mean[c]) / self.std[c]).collect();
        (0..self.bias.len())
            .map(|j| self.bias[j] + (0..3).map(|c| s[c] * self.weights.at(c, j)).sum::<f64>())
            .collect()
    }

    pub fn rates(&self, states: &Tensor) -> Result<Tensor> {
        let mut out = Vec::with_capacity(states.rows() * self.bias.len());
        for r in 0..states.rows() {
            out.extend(self.log_rates(states.row(r)).into_iter().map(f64::exp));
        }
        Tensor::matrix(states.rows(), self.bias.len(), out)
    }
}

/// Independent Poisson counts for every entry of `rates`.
pub fn sample_spikes(rates: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let mut out = Vec::with_capacity(rates.len());
    for &r in rates.data() {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Domain(format!("Poisson rate must be positive, got {r}")));
        }
        let p = Poisson::new(r).map_err(|e| Error::Domain(e.to_string()))?;
        out.push(p.sample(rng));
    }
    Tensor::new(rates.shape().to_vec(), out)
}

/// One trial: spike counts for all neurons plus the task splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    /// `bins × n_neurons` non-negative integer counts.
    pub spikes: Tensor,
    pub rates: Option<Tensor>,
    /// `bins × 3`.
    pub latents: Option<Tensor>,
    /// Sorted held-out neuron indices.
    pub held_out: Vec<usize>,
    /// Trailing bins reserved for forward prediction.
    pub forward_bins: usize,
    pub condition: Option<u32>,
}

impl Trial {
    pub fn new(spikes: Tensor, held_out: Vec<usize>, forward_bins: usize) -> Result<Self> {
        let t = Self {
            spikes,
            rates: None,
            latents: None,
            held_out,
            forward_bins,
            condition: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spikes.shape().len() != 2 {
            return Err(Error::dim("spikes must be a bins × neurons matrix"));
        }
        if self.spikes.data().iter().any(|&x| !(x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64)) {
            return Err(Error::Data("spike counts must be non-negative integers".into()));
        }
        let (bins, n) = (self.spikes.rows(), self.spikes.cols());
        if bins == 0 {
            return Err(Error::Contract("trial has no bins".into()));
        }
        if self.held_out.windows(2).any(|w| w[0] >= w[1]) || self.held_out.iter().any(|&i| i >= n) {
            return Err(Error::Data("held-out indices must be sorted, unique and in range".into()));
        }
        if self.forward_bins >= bins {
            return Err(Error::Data(format!("forward window {} leaves no observed bins", self.forward_bins)));
        }
        if let Some(r) = &self.rates {
            if r.shape() != self.spikes.shape() || r.data().iter().any(|&x| !(x > 0.0)) {
                return Err(Error::Data("rates must be positive and shaped like spikes".into()));
            }
        }
        if let Some(l) = &self.latents {
            if l.shape() != [bins, 3] {
                return Err(Error::dim(format!("latents {:?}, need [{bins}, 3]", l.shape())));
            }
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.spikes.rows()
    }

    pub fn n_neurons(&self) -> usize {
        self.spikes.cols()
    }

    pub fn observed_bins(&self) -> usize {
        self.n_bins() - self.forward_bins
    }

    pub fn held_in(&self) -> Vec<usize> {
        (0..self.n_neurons()).filter(|i| self.held_out.binary_search(i).is_err()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Trial>,
    pub val: Vec<Trial>,
}

impl Dataset {
    pub fn summary(&self) -> DatasetSummary {
        let all = self.train.iter().chain(&self.val);
        let (mut count, mut entries) = (0.0, 0usize);
        for t in all {
            count += t.spikes.data().iter().sum::<f64>();
            entries += t.spikes.len();
        }
        DatasetSummary {
            n_train: self.train.len(),
            n_val: self.val.len(),
            total_spikes: count as u64,
            mean_rate: if entries > 0 { count / entries as f64 } else { 0.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSummary {
    pub n_train: usize,
    pub n_val: usize,
    pub total_spikes: u64,
    pub mean_rate: f64,
}

/// Generates the full dataset. Everything is a function of `cfg`.
pub fn make_dataset(cfg: &LorenzConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut states = Vec::with_capacity(cfg.n_conditions);
    for c in 0..cfg.n_conditions {
        let mut rng = substream(cfg.seed, Stream::Data, 0, c as u64);
        let init = [
            rng.random_range(-15.0..15.0),
            rng.random_range(-15.0..15.0),
            rng.random_range(10.0..40.0),
        ];
        states.push(lorenz_trajectory(cfg, init)?);
    }
    let proj = RateProjection::fit(&states, cfg.n_neurons, cfg.rate_scale, &mut substream(cfg.seed, Stream::Data, 1, 0))?;
    let rates: Vec<Tensor> = states.iter().map(|s| proj.rates(s)).collect::<Result<_>>()?;
    let held_out: Vec<usize> = (cfg.n_neurons - cfg.n_held_out()..cfg.n_neurons).collect();

    let mut ds = Dataset {
        train: Vec::new(),
        val: Vec::new(),
    };
    for i in 0..cfg.n_trials {
        let c = cfg.condition_of(i);
        let spikes = sample_spikes(&rates[c], &mut substream(cfg.seed, Stream::Data, 2, i as u64))?;
        let is_val = i % cfg.val_every == cfg.val_every - 1;
        let trial = Trial {
            spikes,
            rates: Some(rates[c].clone()),
            latents: Some(states[c].clone()),
            held_out: held_out.clone(),
            forward_bins: if is_val { cfg.n_forward() } else { 0 },
            condition: Some(c as u32),
        };
        if is_val {
            ds.val.push(trial);
        } else {
            ds.train.push(trial);
        }
    }
    Ok(ds)
}

pub const LGVF_MAGIC: &[u8; 4] = b"LGVF";
pub const LGVF_VERSION: u32 = 1;

const FLAG_RATES: u8 = 1;
const FLAG_LATENTS: u8 = 2;
const FLAG_CONDITION: u8 = 4;

/// Encodes trials in the LGVF layout (little-endian):
///
/// ```text
/// "LGVF" u32 version u32 n_trials
/// per trial: u32 bins, u32 n_neurons, u8 flags,
///            u32 n_held_out, u32 × n_held_out indices, u32 forward_bins,
///            u32 × bins·n spikes, [f64 × bins·n rates], [f64 × bins·3 latents],
///            [u32 condition]
/// ```
pub fn encode_trials(trials: &[Trial]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(LGVF_MAGIC);
    out.extend_from_slice(&LGVF_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(trials.len())?.to_le_bytes());
    for t in trials {
        t.validate()?;
        out.extend_from_slice(&u32_of(t.n_bins())?.to_le_bytes());
        out.extend_from_slice(&u32_of(t.n_neurons())?.to_le_bytes());
        let flags = (t.rates.is_some() as u8 * FLAG_RATES)
            | (t.latents.is_some() as u8 * FLAG_LATENTS)
            | (t.condition.is_some() as u8 * FLAG_CONDITION);
        out.push(flags);
        out.extend_from_slice(&u32_of(t.held_out.len())?.to_le_bytes());
        for &i in &t.held_out {
            out.extend_from_slice(&u32_of(i)?.to_le_bytes());
        }
        out.extend_from_slice(&u32_of(t.forward_bins)?.to_le_bytes());
        for &x in t.spikes.data() {
            out.extend_from_slice(&(x as u32).to_le_bytes());
        }
        for block in [&t.rates, &t.latents].into_iter().flatten() {
            for &x in block.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(c) = t.condition {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Data(format!("{n} does not fit in u32")))
}

/// Bounds-checked little-endian reader that reports byte offsets.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset(),
            msg: msg.into(),
        })
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::Format {
            offset: self.offset(),
            msg: "length overflow".into(),
        })?;
        let raw = self.bytes(len)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_trials(buf: &[u8]) -> Result<Vec<Trial>> {
    let mut r = ByteReader::new(buf);
    if r.bytes(4)? != LGVF_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected LGVF".into(),
        });
    }
    let version = r.u32()?;
    if version != LGVF_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let n = r.u32()? as usize;
    let mut trials = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let start = r.offset();
        let bins = r.u32()? as usize;
        let neurons = r.u32()? as usize;
        let flags = r.u8()?;
        if flags & !(FLAG_RATES | FLAG_LATENTS | FLAG_CONDITION) != 0 {
            return r.fail(format!("unknown flag bits {flags:#04x}"));
        }
        let n_out = r.u32()? as usize;
        let held_out = (0..n_out).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let forward_bins = r.u32()? as usize;
        let cells = bins
            .checked_mul(neurons)
            .ok_or_else(|| Error::Format { offset: r.offset(), msg: "size overflow".into() })?;
        let raw = r.bytes(cells.saturating_mul(4))?;
        let spikes: Vec<f64> = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let rates = if flags & FLAG_RATES != 0 {
            Some(Tensor::matrix(bins, neurons, r.f64s(cells)?)?)
        } else {
            None
        };
        let latents = if flags & FLAG_LATENTS != 0 {
            Some(Tensor::matrix(bins, 3, r.f64s(bins * 3)?)?)
        } else {
            None
        };
        let condition = if flags & FLAG_CONDITION != 0 { Some(r.u32()?) } else { None };
        let trial = Trial {
            spikes: Tensor::matrix(bins, neurons, spikes)?,
            rates,
            latents,
            held_out,
            forward_bins,
            condition,
        };
        trial.validate().map_err(|e| Error::Format {
            offset: start,
            msg: format!("invalid trial: {e}"),
        })?;
        trials.push(trial);
    }
    if !r.at_end() {
        return r.fail("trailing bytes after last trial");
    }
    Ok(trials)
}

pub fn write_trials(path: impl AsRef<Path>, trials: &[Trial]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_trials(trials)?).map_err(|e| Error::io(path, e))
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    decode_trials(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// File names used inside a dataset directory.
pub const TRAIN_FILE: &str = "train.lgvf";
pub const VAL_FILE: &str = "val.lgvf";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Writes `train.lgvf`, `val.lgvf` and a manifest holding the generating
/// config.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset, cfg: Option<&LorenzConfig>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_trials(dir.join(TRAIN_FILE), &ds.train)?;
    write_trials(dir.join(VAL_FILE), &ds.val)?;
    let s = ds.summary();
    let mut manifest = format!(
        "# generated dataset\nn_train = {}\nn_val = {}\ntotal_spikes = {}\nmean_rate = {}\n",
        s.n_train, s.n_val, s.total_spikes, s.mean_rate
    );
    if let Some(cfg) = cfg {
        let body = toml::to_string(cfg).map_err(|e| Error::config(e.to_string()))?;
        manifest.push_str("\n[lorenz]\n");
        manifest.push_str(&body);
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    Ok(Dataset {
        train: read_trials(dir.join(TRAIN_FILE))?,
        val: read_trials(dir.join(VAL_FILE))?,
    })
}
