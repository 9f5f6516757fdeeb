//! Rate decoders: a single self-attention layer and the linear ablation.
//!
//! Both consume per-bin feature tensors `batch × F` (the concatenation of
//! whichever of `z_t`, `v_t`, `h_t` the model variant provides) and return
//! rates laid out trial-major: row `b · L + t` is trial `b` at bin `t`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{BoundLinear, Linear};
use crate::tensor::{Axis, Tape, Tensor, Var};

/// Rates are clamped to `[RATE_MIN, RATE_MAX]` through their logarithm.
pub const RATE_MIN: f64 = 1e-7;
pub const RATE_MAX: f64 = 1e4;

/// Sinusoidal position table, `len × dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    for pos in 0..len {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = pos as f64 * freq;
            t.data_mut()[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    t
}

/// Reorders a time-major list of `batch × F` bins into one trial-major
/// `(batch · L) × F` matrix.
pub fn stack_trial_major(tape: &mut Tape, features: &[Var]) -> Result<(Var, usize, usize)> {
    let len = features.len();
    let first = features
        .first()
        .ok_or_else(|| Error::Contract("decoder needs at least one time bin".into()))?;
    let batch = tape.value(*first).rows();
    let time_major = tape.concat(features, Axis::Rows)?;
    let order: Vec<usize> = (0..batch).flat_map(|b| (0..len).map(move |t| t * batch + b)).collect();
    Ok((tape.select_rows(time_major, &order)?, batch, len))
}

/// Concatenates `[z_t, v_t, h_t]` at every bin, checking that the three
/// sequences have the same length.
pub fn concat_features(tape: &mut Tape, zs: &[Var], vs: &[Var], hs: &[Var]) -> Result<Vec<Var>> {
    if zs.len() != vs.len() || zs.len() != hs.len() {
        return Err(Error::Contract(format!(
            "sequence lengths differ: z {}, v {}, h {}",
            zs.len(),
            vs.len(),
            hs.len()
        )));
    }
    (0..zs.len()).map(|t| tape.concat(&[zs[t], vs[t], hs[t]], Axis::Cols)).collect()
}

/// `exp(clamp(logits))`.
fn rates_from_logits(tape: &mut Tape, logits: Var) -> Result<Var> {
    let c = tape.clamp(logits, RATE_MIN.ln(), RATE_MAX.ln())?;
    tape.exp(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerDecoder {
    pub input: Linear,
    pub qkv: Linear,
    pub output: Linear,
    pub readout: Linear,
    pub heads: usize,
    pub positional: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundTransformer {
    pub input: BoundLinear,
    pub qkv: BoundLinear,
    pub output: BoundLinear,
    pub readout: BoundLinear,
}

/// Decoder output plus the per-trial, per-head attention matrices
/// (`L × L`, index `b · heads + h`).
#[derive(Clone, Debug)]
pub struct DecodeTrace {
    pub rates: Var,
    pub attention: Vec<Var>,
}

impl TransformerDecoder {
    pub fn new(input: Linear, qkv: Linear, output: Linear, readout: Linear, heads: usize) -> Result<Self> {
        let dim = input.output_dim();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("model_dim {dim} not divisible by {heads} heads")));
        }
        let ok = qkv.input_dim() == dim
            && qkv.output_dim() == 3 * dim
            && output.input_dim() == dim
            && output.output_dim() == dim
            && readout.input_dim() == dim;
        if !ok {
            return Err(Error::dim("inconsistent transformer layer shapes"));
        }
        Ok(Self {
            input,
            qkv,
            output,
            readout,
            heads,
            positional: true,
        })
    }

    pub fn uniform(features: usize, model_dim: usize, heads: usize, n_neurons: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(
            Linear::uniform(features, model_dim, rng),
            Linear::uniform(model_dim, 3 * model_dim, rng),
            Linear::uniform(model_dim, model_dim, rng),
            Linear::uniform(model_dim, n_neurons, rng),
            heads,
        )
    }

    pub fn model_dim(&self) -> usize {
        self.input.output_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundTransformer {
        BoundTransformer {
            input: self.input.bind(tape),
            qkv: self.qkv.bind(tape),
            output: self.output.bind(tape),
            readout: self.readout.bind(tape),
        }
    }

    pub fn decode(&self, tape: &mut Tape, bound: BoundTransformer, features: &[Var]) -> Result<Var> {
        Ok(self.decode_traced(tape, bound, features)?.rates)
    }

    pub fn decode_traced(&self, tape: &mut Tape, bound: BoundTransformer, features: &[Var]) -> Result<DecodeTrace> {
        let (x, batch, len) = stack_trial_major(tape, features)?;
        let dim = self.model_dim();
        let hd = dim / self.heads;
        let mut e = Linear::forward(tape, bound.input, x)?;
        if self.positional {
            let pe = positional_encoding(len, dim);
            let mut tiled = Vec::with_capacity(batch * len * dim);
            for _ in 0..batch {
                tiled.extend_from_slice(pe.data());
            }
            let pe = tape.constant(Tensor::matrix(batch * len, dim, tiled)?);
            e = tape.add(e, pe)?;
        }
        let qkv = Linear::forward(tape, bound.qkv, e)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut attention = Vec::with_capacity(batch * self.heads);
        let mut trials = Vec::with_capacity(batch);
        for b in 0..batch {
            let rows = b * len..(b + 1) * len;
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = tape.slice(qkv, rows.clone(), h * hd..(h + 1) * hd)?;
                let k = tape.slice(qkv, rows.clone(), dim + h * hd..dim + (h + 1) * hd)?;
                let v = tape.slice(qkv, rows.clone(), 2 * dim + h * hd..2 * dim + (h + 1) * hd)?;
                let s = tape.matmul_nt(q, k)?;
                let s = tape.scale(s, scale)?;
                let a = tape.softmax_rows(s)?;
                attention.push(a);
                heads.push(tape.matmul(a, v)?);
            }
            trials.push(tape.concat(&heads, Axis::Cols)?);
        }
        let att = tape.concat(&trials, Axis::Rows)?;
        let proj = Linear::forward(tape, bound.output, att)?;
        let y = tape.add(e, proj)?;
        let logits = Linear::forward(tape, bound.readout, y)?;
        Ok(DecodeTrace {
            rates: rates_from_logits(tape, logits)?,
            attention,
        })
    }
}

/// Per-bin affine readout with no mixing across time.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDecoder {
    pub readout: Linear,
}

impl LinearDecoder {
    pub fn decode(&self, tape: &mut Tape, bound: BoundLinear, features: &[Var]) -> Result<Var> {
        let (x, _, _) = stack_trial_major(tape, features)?;
        let logits = Linear::forward(tape, bound, x)?;
        rates_from_logits(tape, logits)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decoder {
    Transformer(TransformerDecoder),
    Linear(LinearDecoder),
}

#[derive(Clone, Copy, Debug)]
pub enum BoundDecoder {
    Transformer(BoundTransformer),
    Linear(BoundLinear),
}

impl Decoder {
    pub fn bind(&self, tape: &mut Tape) -> BoundDecoder {
        match self {
            Decoder::Transformer(t) => BoundDecoder::Transformer(t.bind(tape)),
            Decoder::Linear(l) => BoundDecoder::Linear(l.readout.bind(tape)),
        }
    }

    pub fn decode(&self, tape: &mut Tape, bound: BoundDecoder, features: &[Var]) -> Result<Var> {
        match (self, bound) {
            (Decoder::Transformer(t), BoundDecoder::Transformer(b)) => t.decode(tape, b, features),
            (Decoder::Linear(l), BoundDecoder::Linear(b)) => l.decode(tape, b, features),
            _ => Err(Error::Contract("decoder bound to a different variant".into())),
        }
    }

    /// The final `model_dim → n_neurons` (or `F → n_neurons`) readout.
    pub fn readout_mut(&mut self) -> &mut Linear {
        match self {
            Decoder::Transformer(t) => &mut t.readout,
            Decoder::Linear(l) => &mut l.readout,
        }
    }

    pub(crate) fn push_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            Decoder::Transformer(t) => {
                t.input.push_params("decoder.input", out);
                t.qkv.push_params("decoder.qkv", out);
                t.output.push_params("decoder.output", out);
                t.readout.push_params("decoder.readout", out);
            }
            Decoder::Linear(l) => l.readout.push_params("decoder.readout", out),
        }
    }

    pub(crate) fn push_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            Decoder::Transformer(t) => {
                t.input.push_params_mut(out);
                t.qkv.push_params_mut(out);
                t.output.push_params_mut(out);
                t.readout.push_params_mut(out);
            }
            Decoder::Linear(l) => l.readout.push_params_mut(out),
        }
    }

    pub(crate) fn push_vars(bound: BoundDecoder, out: &mut Vec<Var>) {
        match bound {
            BoundDecoder::Transformer(b) => {
                for l in [b.input, b.qkv, b.output, b.readout] {
                    Linear::push_vars(l, out);
                }
            }
            BoundDecoder::Linear(b) => Linear::push_vars(b, out),
        }
    }
}
