//! The assembled model: encoder → Langevin rollout → decoder, with the
//! Poisson likelihood, KL terms and coordinated dropout.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Trial;
use crate::decoder::{concat_features, BoundDecoder, Decoder, LinearDecoder, TransformerDecoder};
use crate::encoder::{BoundEncoder, Encoder, GruCell, InitialLatentHead};
use crate::error::{Error, Result};
use crate::langevin::{
    first_order_step, kl_velocity_step, rollout, LangevinParams, LangevinState, NoNoise, NoiseSource, RowStreams,
};
use crate::layers::{BoundLinear, Linear};
use crate::potential::{BoundPotential, OscillatorPotential};
use crate::rng::{substream, Stream};
use crate::tensor::{Axis, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Baseline1LinearDecoder,
    Baseline2LinearEncoder,
    Baseline3NoLangevin,
    Baseline4InputPotential,
    Baseline5FirstOrder,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::Baseline1LinearDecoder,
        Variant::Baseline2LinearEncoder,
        Variant::Baseline3NoLangevin,
        Variant::Baseline4InputPotential,
        Variant::Baseline5FirstOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Baseline1LinearDecoder => "baseline1_linear_decoder",
            Variant::Baseline2LinearEncoder => "baseline2_linear_encoder",
            Variant::Baseline3NoLangevin => "baseline3_no_langevin",
            Variant::Baseline4InputPotential => "baseline4_input_potential",
            Variant::Baseline5FirstOrder => "baseline5_first_order",
        }
    }

    pub fn has_latents(self) -> bool {
        self != Variant::Baseline3NoLangevin
    }

    pub fn has_velocity(self) -> bool {
        !matches!(self, Variant::Baseline3NoLangevin | Variant::Baseline5FirstOrder)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_neurons: usize,
    /// Held-in neurons fed to the encoder.
    pub n_inputs: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub groups: usize,
    pub kernel_size: usize,
    pub gamma: f64,
    pub dt: f64,
    pub mass: f64,
    pub k_b: f64,
    pub tau: f64,
    pub kl_weight_max: f64,
    pub kl_warmup_steps: usize,
    pub coordinated_dropout_rate: f64,
    /// Trailing training bins hidden from the encoder and scored, matching
    /// the forward-prediction setting at evaluation.
    pub forward_mask_bins: usize,
    pub positional_encoding: bool,
    /// Hold the last observed hidden state through the forward window
    /// instead of feeding zero spikes.
    pub freeze_forward_hidden: bool,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_neurons: 29,
            n_inputs: 22,
            latent_dim: 32,
            hidden_dim: 64,
            model_dim: 64,
            heads: 4,
            groups: 4,
            kernel_size: 7,
            gamma: 0.7,
            dt: 1.0,
            mass: 1.0,
            k_b: 1.0,
            tau: 1.0,
            kl_weight_max: 0.1,
            kl_warmup_steps: 1000,
            coordinated_dropout_rate: 0.25,
            forward_mask_bins: 12,
            positional_encoding: true,
            freeze_forward_hidden: false,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn langevin(&self) -> LangevinParams {
        LangevinParams {
            gamma: self.gamma,
            mass: self.mass,
            k_b: self.k_b,
            tau: self.tau,
            dt: self.dt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_neurons", self.n_neurons),
            ("n_inputs", self.n_inputs),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("groups", self.groups),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.n_inputs > self.n_neurons {
            return Err(Error::config("n_inputs exceeds n_neurons"));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.latent_dim % self.groups != 0 {
            return Err(Error::config(format!(
                "latent_dim {} not divisible by {} groups",
                self.latent_dim, self.groups
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        if !(0.0..1.0).contains(&self.coordinated_dropout_rate) {
            return Err(Error::config(format!(
                "coordinated_dropout_rate {} must lie in [0, 1)",
                self.coordinated_dropout_rate
            )));
        }
        if !(self.kl_weight_max >= 0.0 && self.kl_weight_max.is_finite()) {
            return Err(Error::config("kl_weight_max must be non-negative"));
        }
        self.langevin().validate()
    }

    /// First eight bytes of the SHA-256 of the JSON encoding.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Size of the per-bin feature vector the decoder reads.
    pub fn decoder_features(&self) -> usize {
        if self.variant.has_latents() {
            2 * self.latent_dim + self.hidden_dim
        } else {
            self.hidden_dim
        }
    }
}

/// Human-readable description of the architecture and every toggle.
pub fn model_card(cfg: &ModelConfig) -> String {
    let encoder = if cfg.variant == Variant::Baseline2LinearEncoder {
        "per-bin affine map (no recurrence)".to_string()
    } else {
        format!("single-layer GRU, hidden {}, zero initial state", cfg.hidden_dim)
    };
    let decoder = if cfg.variant == Variant::Baseline1LinearDecoder {
        "per-bin affine readout, exp nonlinearity".to_string()
    } else {
        format!(
            "1 self-attention layer, {} heads, model_dim {}, residual, no layer norm, no feed-forward, {} positional encoding, exp readout",
            cfg.heads,
            cfg.model_dim,
            if cfg.positional_encoding { "sinusoidal" } else { "no" }
        )
    };
    let dynamics = match cfg.variant {
        Variant::Baseline3NoLangevin => "none (decoder reads hidden states only)".to_string(),
        Variant::Baseline5FirstOrder => "first-order gradient flow z ← z − ∇U(z)·dt".to_string(),
        Variant::Baseline4InputPotential => "underdamped Langevin, potential coupled to input spikes".to_string(),
        _ => "underdamped Langevin".to_string(),
    };
    format!(
        "variant = {}\n\
         encoder = {encoder}\n\
         decoder = {decoder}\n\
         dynamics = {dynamics}\n\
         latent_dim = {}\n\
         potential = {} groups, kernel {}, spectral normalization by power iteration\n\
         gamma = {}\nmass = {}\nk_b = {}\ntau = {}\ndt = {}\n\
         kl_weight_max = {}\nkl_warmup_steps = {}\n\
         coordinated_dropout_rate = {} (config choice; loss on dropped entries)\n\
         forward_mask_bins = {}\n\
         forward_hidden = {}\n\
         logvar_clamp = [-10, 10]\nrate_clamp = [1e-7, 1e4]\n\
         config_hash = {:016x}\n",
        cfg.variant,
        cfg.latent_dim,
        cfg.groups,
        cfg.kernel_size,
        cfg.gamma,
        cfg.mass,
        cfg.k_b,
        cfg.tau,
        cfg.dt,
        cfg.kl_weight_max,
        cfg.kl_warmup_steps,
        cfg.coordinated_dropout_rate,
        cfg.forward_mask_bins,
        if cfg.freeze_forward_hidden { "frozen" } else { "zero input" },
        cfg.hash()
    )
}

/// `ln x!` via the log-gamma function.
pub fn log_factorial(x: f64) -> f64 {
    libm::lgamma(x + 1.0)
}

fn check_counts(spikes: &[f64]) -> Result<()> {
    if let Some(x) = spikes.iter().find(|&&x| !(x >= 0.0) || x.fract() != 0.0) {
        return Err(Error::Data(format!("spike count {x} is not a non-negative integer")));
    }
    Ok(())
}

/// `Σ mask · (r − x ln r + ln x!)`.
pub fn poisson_nll(rates: &[f64], spikes: &[f64], mask: Option<&[f64]>) -> Result<f64> {
    if rates.len() != spikes.len() || mask.is_some_and(|m| m.len() != rates.len()) {
        return Err(Error::dim("rates, spikes and mask must have equal length"));
    }
    check_counts(spikes)?;
    let mut total = 0.0;
    for i in 0..rates.len() {
        let w = mask.map_or(1.0, |m| m[i]);
        if w == 0.0 {
            continue;
        }
        let (r, x) = (rates[i], spikes[i]);
        if !(r > 0.0) {
            return Err(Error::Domain(format!("rate {r} must be positive")));
        }
        total += w * (r - x * r.ln() + log_factorial(x));
    }
    Ok(total)
}

/// Tape version of [`poisson_nll`]; `spikes` and `mask` are constants.
pub fn poisson_nll_tape(tape: &mut Tape, rates: Var, spikes: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
    if tape.shape(rates) != spikes.shape() || mask.is_some_and(|m| m.shape() != spikes.shape()) {
        return Err(Error::dim("rates, spikes and mask must have equal shape"));
    }
    check_counts(spikes.data())?;
    let lr = tape.log(rates)?;
    let x = tape.constant(spikes.clone());
    let xl = tape.mul(x, lr)?;
    let per = tape.sub(rates, xl)?;
    let (per, constant) = match mask {
        Some(m) => {
            let c = m.data().iter().zip(spikes.data()).map(|(&w, &x)| w * log_factorial(x)).sum::<f64>();
            let mv = tape.constant(m.clone());
            (tape.mul(per, mv)?, c)
        }
        None => (per, spikes.data().iter().map(|&x| log_factorial(x)).sum()),
    };
    let s = tape.sum(per)?;
    tape.add_scalar(s, constant)
}

/// Drops every entry with probability `rate`. Returns the zeroed inputs and
/// a 0/1 loss mask selecting the dropped entries, or every entry when
/// nothing was dropped.
pub fn coordinated_dropout(spikes: &Tensor, rate: f64, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} must lie in [0, 1)")));
    }
    let mut masked = spikes.clone();
    let mut mask = Tensor::zeros(spikes.shape());
    let mut any = false;
    if rate > 0.0 {
        for (x, m) in masked.data_mut().iter_mut().zip(mask.data_mut()) {
            if rng.random::<f64>() < rate {
                *x = 0.0;
                *m = 1.0;
                any = true;
            }
        }
    }
    if !any {
        mask = Tensor::full(spikes.shape(), 1.0);
    }
    Ok((masked, mask))
}

/// How a [`Batch`] prepares encoder inputs and the loss mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchMode {
    /// Coordinated dropout and forward masking, with randomness keyed by
    /// `(seed, step, trial id)`.
    Train {
        dropout_rate: f64,
        forward_mask_bins: usize,
        seed: u64,
        step: u64,
    },
    /// All held-in spikes of the observed window; forward bins get zero input.
    Eval,
}

impl BatchMode {
    pub fn train(cfg: &ModelConfig, seed: u64, step: u64) -> Self {
        BatchMode::Train {
            dropout_rate: cfg.coordinated_dropout_rate,
            forward_mask_bins: cfg.forward_mask_bins,
            seed,
            step,
        }
    }
}

/// Trials stacked for one forward pass. Row `b·L + t` of `targets` and
/// `mask` is trial `b` at bin `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub trial_ids: Vec<u64>,
    pub len: usize,
    /// Per-bin encoder inputs, `batch × n_inputs`.
    pub inputs: Vec<Tensor>,
    pub targets: Tensor,
    pub mask: Tensor,
    /// Bins whose spikes the encoder saw, per trial.
    pub observed: Vec<usize>,
    /// Real (unpadded) bins per trial.
    pub bins: Vec<usize>,
}

impl Batch {
    pub fn new(trials: &[&Trial], ids: &[u64], mode: BatchMode) -> Result<Self> {
        let first = trials.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        if ids.len() != trials.len() {
            return Err(Error::Contract("one id per trial required".into()));
        }
        let n = first.n_neurons();
        let held_in = first.held_in();
        let len = trials.iter().map(|t| t.n_bins()).max().unwrap();
        let b = trials.len();
        let n_in = held_in.len();
        let mut inputs = vec![Tensor::zeros(&[b, n_in]); len];
        let mut targets = Tensor::zeros(&[b * len, n]);
        let mut mask = Tensor::zeros(&[b * len, n]);
        let mut observed = Vec::with_capacity(b);
        let mut bins = Vec::with_capacity(b);
        for (row, (trial, &id)) in trials.iter().zip(ids).enumerate() {
            if trial.n_neurons() != n || trial.held_out != first.held_out {
                return Err(Error::Data("trials in a batch must share the neuron split".into()));
            }
            let l = trial.n_bins();
            let mut x = Tensor::zeros(&[l, n_in]);
            for t in 0..l {
                for (k, &j) in held_in.iter().enumerate() {
                    x.data_mut()[t * n_in + k] = trial.spikes.at(t, j);
                }
            }
            let mut m = Tensor::full(&[l, n], 1.0);
            let seen = match mode {
                BatchMode::Eval => trial.observed_bins(),
                BatchMode::Train {
                    dropout_rate,
                    forward_mask_bins,
                    seed,
                    step,
                } => {
                    let hidden = trial.forward_bins.max(forward_mask_bins).min(l - 1);
                    let seen = l - hidden;
                    let mut rng = substream(seed, Stream::Dropout, step, id);
                    let (dropped, cd) = coordinated_dropout(&x, dropout_rate, &mut rng)?;
                    x = dropped;
                    if dropout_rate > 0.0 {
                        for t in 0..seen {
                            for (k, &j) in held_in.iter().enumerate() {
                                m.data_mut()[t * n + j] = cd.at(t, k);
                            }
                        }
                    }
                    seen
                }
            };
            for t in 0..seen {
                inputs[t].data_mut()[row * n_in..(row + 1) * n_in].copy_from_slice(x.row(t));
            }
            let base = row * len * n;
            targets.data_mut()[base..base + l * n].copy_from_slice(trial.spikes.data());
            mask.data_mut()[base..base + l * n].copy_from_slice(m.data());
            observed.push(seen);
            bins.push(l);
        }
        Ok(Self {
            trial_ids: ids.to_vec(),
            len,
            inputs,
            targets,
            mask,
            observed,
            bins,
        })
    }

    pub fn size(&self) -> usize {
        self.trial_ids.len()
    }

    /// One OU/re-parameterization noise stream per trial.
    pub fn noise(&self, seed: u64, step: u64) -> RowStreams {
        RowStreams::new(self.trial_ids.iter().map(|&id| substream(seed, Stream::OuNoise, step, id)).collect())
    }
}

/// Handles to every parameter on one tape, in [`LangevinFlow::params`] order.
#[derive(Clone, Copy, Debug)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub head: Option<BoundLinear>,
    pub potential: Option<BoundPotential>,
    pub decoder: BoundDecoder,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(batch · len) × n_neurons`, trial-major.
    pub rates: Var,
    pub kl_total: Var,
    pub kl_z0: Option<Var>,
    pub kl_v0: Option<Var>,
    pub kl_steps: Vec<Var>,
    pub zs: Vec<Var>,
    pub vs: Vec<Var>,
    pub hs: Vec<Var>,
}

/// Eval-mode outputs for one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `bins × n_neurons`.
    pub rates: Tensor,
    /// `bins × latent_dim`, absent for the no-latent variant.
    pub z: Option<Tensor>,
    pub v: Option<Tensor>,
}

/// Scalar summaries of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LangevinFlow {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub head: Option<InitialLatentHead>,
    pub potential: Option<OscillatorPotential>,
    pub decoder: Decoder,
}

impl LangevinFlow {
    /// Random initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng: ChaCha8Rng = substream(config.seed, Stream::Init, 0, 0);
        let c = &config;
        let encoder = match c.variant {
            Variant::Baseline2LinearEncoder => Encoder::Linear(Linear::uniform(c.n_inputs, c.hidden_dim, &mut rng)),
            _ => Encoder::Gru(GruCell::uniform(c.n_inputs, c.hidden_dim, &mut rng)),
        };
        let (head, potential) = if c.variant.has_latents() {
            let head = InitialLatentHead::uniform(c.hidden_dim, c.latent_dim, c.variant.has_velocity(), &mut rng);
            let mut pot = OscillatorPotential::random(c.groups, c.kernel_size, &mut rng)?;
            if c.variant == Variant::Baseline4InputPotential {
                let b = 1.0 / (c.n_inputs as f64).sqrt();
                let w: Vec<f64> = (0..c.latent_dim * c.n_inputs).map(|_| rng.random_range(-b..b)).collect();
                pot = pot.with_input_coupling(Tensor::matrix(c.latent_dim, c.n_inputs, w)?);
            }
            (Some(head), Some(pot))
        } else {
            (None, None)
        };
        let features = c.decoder_features();
        let decoder = match c.variant {
            Variant::Baseline1LinearDecoder => Decoder::Linear(LinearDecoder {
                readout: Linear::uniform(features, c.n_neurons, &mut rng),
            }),
            _ => {
                let mut t = TransformerDecoder::uniform(features, c.model_dim, c.heads, c.n_neurons, &mut rng)?;
                t.positional = c.positional_encoding;
                Decoder::Transformer(t)
            }
        };
        Ok(Self {
            config,
            encoder,
            head,
            potential,
            decoder,
        })
    }

    /// Sets the readout bias to `ln(mean rate)` per neuron.
    pub fn init_readout_bias(&mut self, trials: &[Trial]) {
        let n = self.config.n_neurons;
        let mut sums = vec![0.0; n];
        let mut bins = 0usize;
        for t in trials {
            for r in 0..t.n_bins() {
                for (s, &x) in sums.iter_mut().zip(t.spikes.row(r)) {
                    *s += x;
                }
            }
            bins += t.n_bins();
        }
        if bins == 0 {
            return;
        }
        let bias = &mut self.decoder.readout_mut().bias;
        for (b, s) in bias.data_mut().iter_mut().zip(sums) {
            *b = (s / bins as f64).max(1e-3).ln();
        }
    }

    /// Named parameters in canonical order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.push_params(&mut out);
        if let Some(h) = &self.head {
            h.linear.push_params("head", &mut out);
        }
        if let Some(p) = &self.potential {
            out.push(("potential.kernel_half".into(), p.kernel_half()));
            if let Some(w) = p.input_coupling() {
                out.push(("potential.input_coupling".into(), w));
            }
        }
        self.decoder.push_params(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.encoder.push_params_mut(&mut out);
        if let Some(h) = &mut self.head {
            h.linear.push_params_mut(&mut out);
        }
        if let Some(p) = &mut self.potential {
            let (k, w) = p.params_mut();
            out.push(k);
            if let Some(w) = w {
                out.push(w);
            }
        }
        self.decoder.push_params_mut(&mut out);
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(tape),
            head: self.head.as_ref().map(|h| h.linear.bind(tape)),
            potential: self.potential.as_ref().map(|p| p.bind(tape)),
            decoder: self.decoder.bind(tape),
        }
    }

    /// Bound parameter handles in canonical order.
    pub fn vars(bound: &BoundModel) -> Vec<Var> {
        let mut out = Vec::new();
        Encoder::push_vars(bound.encoder, &mut out);
        if let Some(h) = bound.head {
            Linear::push_vars(h, &mut out);
        }
        if let Some(p) = bound.potential {
            out.push(p.kernel_half);
            out.extend(p.input_coupling);
        }
        Decoder::push_vars(bound.decoder, &mut out);
        out
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        batch: &Batch,
        noise: &mut dyn NoiseSource,
    ) -> Result<ForwardOutput> {
        if batch.inputs.first().is_some_and(|x| x.cols() != self.config.n_inputs)
            || batch.targets.cols() != self.config.n_neurons
        {
            return Err(Error::Contract(format!(
                "batch has {} inputs / {} neurons, model expects {} / {}",
                batch.inputs.first().map_or(0, |x| x.cols()),
                batch.targets.cols(),
                self.config.n_inputs,
                self.config.n_neurons
            )));
        }
        let xs: Vec<Var> = batch.inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let mut hs = self.encoder.encode(tape, bound.encoder, &xs)?;
        if self.config.freeze_forward_hidden {
            hs = freeze_hidden(tape, &hs, &batch.observed)?;
        }
        let steps = batch.len - 1;
        let zero = tape.constant(Tensor::scalar(0.0));
        let (Some(head), Some(pot), Some(bh), Some(bp)) = (&self.head, &self.potential, bound.head, bound.potential)
        else {
            let rates = self.decoder.decode(tape, bound.decoder, &hs)?;
            return Ok(ForwardOutput {
                rates,
                kl_total: zero,
                kl_z0: None,
                kl_v0: None,
                kl_steps: Vec::new(),
                zs: Vec::new(),
                vs: Vec::new(),
                hs,
            });
        };
        let bp = pot.prepare(tape, bp, self.config.latent_dim)?;
        let init = head.init_latents(tape, bh, hs[0], noise)?;
        let params = self.config.langevin();
        let (zs, vs, kl_steps) = match init.v0 {
            Some(v0) => {
                let inputs = (self.config.variant == Variant::Baseline4InputPotential).then_some(&xs[..]);
                let state = LangevinState { z: init.z0, v: v0, t: 0 };
                let traj = rollout(tape, state, &params, pot, bp, steps, noise, inputs)?;
                // a noiseless transition has no finite KL; only prediction
                // is meaningful then, and `loss` refuses it
                let kls = if params.transition_variance() > 0.0 {
                    traj.mus
                        .iter()
                        .map(|&mu| kl_velocity_step(tape, mu, &params))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    Vec::new()
                };
                (traj.zs, traj.vs, kls)
            }
            None => {
                let mut zs = vec![init.z0];
                for _ in 0..steps {
                    let z = first_order_step(tape, *zs.last().unwrap(), params.dt, pot, bp, None)?;
                    zs.push(z);
                }
                let shape = tape.shape(init.z0).to_vec();
                let v = tape.constant(Tensor::zeros(&shape));
                (zs, vec![v; steps + 1], Vec::new())
            }
        };
        let features = concat_features(tape, &zs, &vs, &hs)?;
        let rates = self.decoder.decode(tape, bound.decoder, &features)?;
        let mut kl_total = init.kl_z;
        for &k in init.kl_v.iter().chain(&kl_steps) {
            kl_total = tape.add(kl_total, k)?;
        }
        Ok(ForwardOutput {
            rates,
            kl_total,
            kl_z0: Some(init.kl_z),
            kl_v0: init.kl_v,
            kl_steps,
            zs,
            vs,
            hs,
        })
    }

    /// `(Σ masked Poisson NLL + λ · KL) / batch`.
    pub fn loss(&self, tape: &mut Tape, fo: &ForwardOutput, batch: &Batch, lambda: f64) -> Result<(Var, Var)> {
        if lambda < 0.0 {
            return Err(Error::Domain(format!("KL weight {lambda} must be non-negative")));
        }
        if self.config.variant.has_velocity() && self.config.langevin().transition_variance() <= 0.0 {
            return Err(Error::Domain("velocity KL undefined for a noiseless transition (gamma = 0)".into()));
        }
        let nll = poisson_nll_tape(tape, fo.rates, &batch.targets, Some(&batch.mask))?;
        let kl = tape.scale(fo.kl_total, lambda)?;
        let total = tape.add(nll, kl)?;
        Ok((tape.scale(total, 1.0 / batch.size() as f64)?, nll))
    }

    /// Loss and gradients in [`params`](Self::params) order.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        lambda: f64,
        noise: &mut dyn NoiseSource,
    ) -> Result<(LossParts, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let fo = self.forward(&mut tape, &bound, batch, noise)?;
        let (loss, nll) = self.loss(&mut tape, &fo, batch, lambda)?;
        let parts = LossParts {
            loss: tape.value(loss).item(),
            nll: tape.value(nll).item() / batch.size() as f64,
            kl: tape.value(fo.kl_total).item() / batch.size() as f64,
        };
        let mut grads: Gradients = tape.backward(loss)?;
        let out = Self::vars(&bound)
            .into_iter()
            .map(|v| grads.take(v).expect("parameter gradient"))
            .collect();
        Ok((parts, out))
    }

    /// Loss value only.
    pub fn loss_value(&self, batch: &Batch, lambda: f64, noise: &mut dyn NoiseSource) -> Result<LossParts> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let fo = self.forward(&mut tape, &bound, batch, noise)?;
        let (loss, nll) = self.loss(&mut tape, &fo, batch, lambda)?;
        Ok(LossParts {
            loss: tape.value(loss).item(),
            nll: tape.value(nll).item() / batch.size() as f64,
            kl: tape.value(fo.kl_total).item() / batch.size() as f64,
        })
    }

    /// Deterministic predictions: encoder sees held-in spikes of the
    /// observed window, noise is replaced by its mean.
    pub fn predict(&self, trials: &[Trial]) -> Result<Vec<Prediction>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(trials.len());
        for (c, chunk) in trials.chunks(CHUNK).enumerate() {
            let refs: Vec<&Trial> = chunk.iter().collect();
            let ids: Vec<u64> = (0..chunk.len()).map(|i| (c * CHUNK + i) as u64).collect();
            let batch = Batch::new(&refs, &ids, BatchMode::Eval)?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let fo = self.forward(&mut tape, &bound, &batch, &mut NoNoise)?;
            let rates = tape.value(fo.rates);
            let n = self.config.n_neurons;
            for (b, trial) in chunk.iter().enumerate() {
                let l = trial.n_bins();
                let start = b * batch.len * n;
                let r = Tensor::matrix(l, n, rates.data()[start..start + l * n].to_vec())?;
                let gather = |seq: &[Var]| -> Option<Tensor> {
                    if seq.is_empty() {
                        return None;
                    }
                    let d = tape.value(seq[0]).cols();
                    let data = seq[..l].iter().flat_map(|&v| tape.value(v).row(b).to_vec()).collect();
                    Some(Tensor::matrix(l, d, data).expect("latent shape"))
                };
                out.push(Prediction {
                    rates: r,
                    z: gather(&fo.zs),
                    v: gather(&fo.vs),
                });
            }
        }
        Ok(out)
    }
}

/// Replaces `h_t` for `t ≥ observed[b]` by trial `b`'s last observed state.
fn freeze_hidden(tape: &mut Tape, hs: &[Var], observed: &[usize]) -> Result<Vec<Var>> {
    let b = observed.len();
    if observed.iter().all(|&o| o >= hs.len()) {
        return Ok(hs.to_vec());
    }
    let all = tape.concat(hs, Axis::Rows)?;
    let idx: Vec<usize> = (0..hs.len())
        .flat_map(|t| (0..b).map(move |r| t.min(observed[r].max(1) - 1) * b + r))
        .collect();
    let frozen = tape.select_rows(all, &idx)?;
    (0..hs.len()).map(|t| tape.slice_rows(frozen, t * b..(t + 1) * b)).collect()
}
