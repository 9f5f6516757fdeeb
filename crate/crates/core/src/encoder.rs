//! Recurrent encoder and the initial-latent head.
//!
//! Sequences are lists of `batch × features` tape values, one per time bin.

use rand::Rng;

use crate::error::{Error, Result};
use crate::langevin::NoiseSource;
use crate::layers::{BoundLinear, Linear};
use crate::tensor::{Axis, Tape, Tensor, Var};

/// Lower and upper bound applied to predicted log-variances.
pub const LOGVAR_CLAMP: (f64, f64) = (-10.0, 10.0);

/// GRU cell. Input weights for the reset, update and candidate gates are
/// packed column-wise into `w_x: input × 3H`; recurrent weights are split
/// into `u_ru: H × 2H` and `u_c: H × H`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub w_x: Tensor,
    pub u_ru: Tensor,
    pub u_c: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGru {
    pub w_x: Var,
    pub u_ru: Var,
    pub u_c: Var,
    pub bias: Var,
}

impl GruCell {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w_x: Tensor::zeros(&[input_dim, 3 * hidden_dim]),
            u_ru: Tensor::zeros(&[hidden_dim, 2 * hidden_dim]),
            u_c: Tensor::zeros(&[hidden_dim, hidden_dim]),
            bias: Tensor::zeros(&[1, 3 * hidden_dim]),
        }
    }

    /// Every weight uniform in `±1/sqrt(hidden_dim)`.
    pub fn uniform(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (hidden_dim as f64).sqrt();
        let mut fill = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-b..b));
        let mut cell = Self::zeros(input_dim, hidden_dim);
        fill(&mut cell.w_x);
        fill(&mut cell.u_ru);
        fill(&mut cell.u_c);
        fill(&mut cell.bias);
        cell
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.u_c.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundGru {
        BoundGru {
            w_x: tape.leaf(self.w_x.clone()),
            u_ru: tape.leaf(self.u_ru.clone()),
            u_c: tape.leaf(self.u_c.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    /// One recurrence for `x: rows × input`, `h: rows × H`.
    pub fn gru_step(&self, tape: &mut Tape, bound: BoundGru, x: Var, h: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim() || tape.value(h).cols() != self.hidden_dim() {
            return Err(Error::dim(format!(
                "gru_step got x {:?}, h {:?} for input {} hidden {}",
                tape.shape(x),
                tape.shape(h),
                self.input_dim(),
                self.hidden_dim()
            )));
        }
        let xw = tape.affine(x, bound.w_x, bound.bias)?;
        self.step_projected(tape, bound, xw, h)
    }

    /// Recurrence given the precomputed input projection `x·W_x + b`.
    fn step_projected(&self, tape: &mut Tape, bound: BoundGru, xw: Var, h: Var) -> Result<Var> {
        let hd = self.hidden_dim();
        let x_ru = tape.slice_cols(xw, 0..2 * hd)?;
        let x_c = tape.slice_cols(xw, 2 * hd..3 * hd)?;
        let h_ru = tape.matmul(h, bound.u_ru)?;
        let pre = tape.add(x_ru, h_ru)?;
        let gates = tape.sigmoid(pre)?;
        let r = tape.slice_cols(gates, 0..hd)?;
        let u = tape.slice_cols(gates, hd..2 * hd)?;
        let rh = tape.mul(r, h)?;
        let h_c = tape.matmul(rh, bound.u_c)?;
        let pre_c = tape.add(x_c, h_c)?;
        let c = tape.tanh(pre_c)?;
        let diff = tape.sub(c, h)?;
        let step = tape.mul(u, diff)?;
        tape.add(h, step)
    }

    /// Hidden states `h_0 … h_T` from inputs `x_0 … x_T`, starting at zero.
    pub fn encode_sequence(&self, tape: &mut Tape, bound: BoundGru, xs: &[Var]) -> Result<Vec<Var>> {
        let rows = check_sequence(tape, xs, self.input_dim())?;
        let stacked = tape.concat(xs, Axis::Rows)?;
        let proj = tape.affine(stacked, bound.w_x, bound.bias)?;
        let mut h = tape.constant(Tensor::zeros(&[rows, self.hidden_dim()]));
        let mut hs = Vec::with_capacity(xs.len());
        for t in 0..xs.len() {
            let xw = tape.slice_rows(proj, t * rows..(t + 1) * rows)?;
            h = self.step_projected(tape, bound, xw, h)?;
            hs.push(h);
        }
        Ok(hs)
    }

    pub(crate) fn push_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w_x"), &self.w_x));
        out.push((format!("{prefix}.u_ru"), &self.u_ru));
        out.push((format!("{prefix}.u_c"), &self.u_c));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn push_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.extend([&mut self.w_x, &mut self.u_ru, &mut self.u_c, &mut self.bias]);
    }
}

fn check_sequence(tape: &Tape, xs: &[Var], input_dim: usize) -> Result<usize> {
    let first = xs.first().ok_or_else(|| Error::Contract("empty trial: no time bins".into()))?;
    let rows = tape.value(*first).rows();
    for &x in xs {
        let s = tape.value(x);
        if s.rows() != rows || s.cols() != input_dim {
            return Err(Error::dim(format!(
                "sequence element {:?} does not match [{rows}, {input_dim}]",
                s.shape()
            )));
        }
    }
    Ok(rows)
}

/// Either the recurrent encoder or the per-bin affine map used by the
/// linear-encoder ablation.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Gru(GruCell),
    Linear(Linear),
}

#[derive(Clone, Copy, Debug)]
pub enum BoundEncoder {
    Gru(BoundGru),
    Linear(BoundLinear),
}

impl Encoder {
    pub fn hidden_dim(&self) -> usize {
        match self {
            Encoder::Gru(g) => g.hidden_dim(),
            Encoder::Linear(l) => l.output_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Encoder::Gru(g) => g.input_dim(),
            Encoder::Linear(l) => l.input_dim(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        match self {
            Encoder::Gru(g) => BoundEncoder::Gru(g.bind(tape)),
            Encoder::Linear(l) => BoundEncoder::Linear(l.bind(tape)),
        }
    }

    pub fn encode(&self, tape: &mut Tape, bound: BoundEncoder, xs: &[Var]) -> Result<Vec<Var>> {
        match (self, bound) {
            (Encoder::Gru(g), BoundEncoder::Gru(b)) => g.encode_sequence(tape, b, xs),
            (Encoder::Linear(l), BoundEncoder::Linear(b)) => {
                let rows = check_sequence(tape, xs, l.input_dim())?;
                let stacked = tape.concat(xs, Axis::Rows)?;
                let proj = Linear::forward(tape, b, stacked)?;
                (0..xs.len()).map(|t| tape.slice_rows(proj, t * rows..(t + 1) * rows)).collect()
            }
            _ => Err(Error::Contract("encoder bound to a different variant".into())),
        }
    }

    pub(crate) fn push_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            Encoder::Gru(g) => g.push_params("encoder", out),
            Encoder::Linear(l) => l.push_params("encoder", out),
        }
    }

    pub(crate) fn push_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            Encoder::Gru(g) => g.push_params_mut(out),
            Encoder::Linear(l) => l.push_params_mut(out),
        }
    }

    pub(crate) fn push_vars(bound: BoundEncoder, out: &mut Vec<Var>) {
        match bound {
            BoundEncoder::Gru(b) => out.extend([b.w_x, b.u_ru, b.u_c, b.bias]),
            BoundEncoder::Linear(b) => Linear::push_vars(b, out),
        }
    }
}

/// Maps `h_0` to Gaussian posteriors over `z_0` and, optionally, `v_0`.
/// Output columns are laid out `[μ_z, logσ²_z, μ_v, logσ²_v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialLatentHead {
    pub linear: Linear,
    latent_dim: usize,
    with_velocity: bool,
}

/// Sampled initial latents and their KL terms (scalars summed over the batch).
#[derive(Clone, Copy, Debug)]
pub struct InitialLatents {
    pub z0: Var,
    pub v0: Option<Var>,
    pub kl_z: Var,
    pub kl_v: Option<Var>,
}

impl InitialLatentHead {
    pub fn new(linear: Linear, latent_dim: usize, with_velocity: bool) -> Result<Self> {
        let blocks = if with_velocity { 4 } else { 2 };
        if linear.output_dim() != blocks * latent_dim {
            return Err(Error::dim(format!(
                "latent head outputs {}, need {}",
                linear.output_dim(),
                blocks * latent_dim
            )));
        }
        Ok(Self {
            linear,
            latent_dim,
            with_velocity,
        })
    }

    pub fn uniform(hidden_dim: usize, latent_dim: usize, with_velocity: bool, rng: &mut impl Rng) -> Self {
        let blocks = if with_velocity { 4 } else { 2 };
        Self::new(Linear::uniform(hidden_dim, blocks * latent_dim, rng), latent_dim, with_velocity)
            .expect("consistent head shape")
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn with_velocity(&self) -> bool {
        self.with_velocity
    }

    pub fn init_latents(
        &self,
        tape: &mut Tape,
        bound: BoundLinear,
        h0: Var,
        noise: &mut dyn NoiseSource,
    ) -> Result<InitialLatents> {
        let d = self.latent_dim;
        let out = Linear::forward(tape, bound, h0)?;
        let (z0, kl_z) = sample_block(tape, out, 0, d, noise)?;
        if !self.with_velocity {
            return Ok(InitialLatents {
                z0,
                v0: None,
                kl_z,
                kl_v: None,
            });
        }
        let (v0, kl_v) = sample_block(tape, out, 2 * d, d, noise)?;
        Ok(InitialLatents {
            z0,
            v0: Some(v0),
            kl_z,
            kl_v: Some(kl_v),
        })
    }
}

/// Re-parameterized sample and `KL(q ‖ N(0, I))` for the block of columns
/// `[start, start + 2d)` holding `(μ, logσ²)`.
fn sample_block(
    tape: &mut Tape,
    out: Var,
    start: usize,
    d: usize,
    noise: &mut dyn NoiseSource,
) -> Result<(Var, Var)> {
    let mu = tape.slice_cols(out, start..start + d)?;
    let raw = tape.slice_cols(out, start + d..start + 2 * d)?;
    let lv = tape.clamp(raw, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1)?;
    let rows = tape.value(mu).rows();
    let sample = match noise.draw(rows, d) {
        Some(eps) => {
            let eps = tape.constant(eps);
            let half = tape.scale(lv, 0.5)?;
            let sd = tape.exp(half)?;
            let kick = tape.mul(sd, eps)?;
            tape.add(mu, kick)?
        }
        None => mu,
    };
    let kl = gaussian_kl_tape(tape, mu, lv)?;
    Ok((sample, kl))
}

/// `½ Σ (μ² + e^{lv} − 1 − lv)`.
pub fn gaussian_kl_tape(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let n = tape.value(mu).len() as f64;
    let m2 = tape.square(mu)?;
    let var = tape.exp(logvar)?;
    let a = tape.add(m2, var)?;
    let b = tape.sub(a, logvar)?;
    let s = tape.sum(b)?;
    let s = tape.add_scalar(s, -n)?;
    tape.scale(s, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langevin::{NoNoise, RowStreams};
    use crate::tensor::{finite_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_cell_halves_hidden_state() {
        let cell = GruCell::zeros(3, 2);
        let mut tape = Tape::new();
        let b = cell.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let h = tape.constant(Tensor::matrix(1, 2, vec![0.8, -0.4]).unwrap());
        let h1 = cell.gru_step(&mut tape, b, x, h).unwrap();
        assert_eq!(tape.value(h1).data(), &[0.4, -0.2]);
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        let h2 = cell.gru_step(&mut tape, b, x, z).unwrap();
        assert_eq!(tape.value(h2).data(), &[0.0, 0.0]);
    }

    #[test]
    fn gru_step_matches_hand_formula() {
        let cell = GruCell::uniform(2, 2, &mut rng(3));
        let x = [0.3, -1.1];
        let h = [0.2, 0.7];
        let mut tape = Tape::new();
        let b = cell.bind(&mut tape);
        let xv = tape.constant(Tensor::matrix(1, 2, x.to_vec()).unwrap());
        let hv = tape.constant(Tensor::matrix(1, 2, h.to_vec()).unwrap());
        let out = cell.gru_step(&mut tape, b, xv, hv).unwrap();

        let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
        let hd = 2;
        let xw = |j: usize| (0..2).map(|i| x[i] * cell.w_x.at(i, j)).sum::<f64>() + cell.bias.at(0, j);
        let hu = |j: usize| (0..2).map(|i| h[i] * cell.u_ru.at(i, j)).sum::<f64>();
        let r: Vec<f64> = (0..hd).map(|j| sig(xw(j) + hu(j))).collect();
        let u: Vec<f64> = (0..hd).map(|j| sig(xw(hd + j) + hu(hd + j))).collect();
        let expect: Vec<f64> = (0..hd)
            .map(|j| {
                let rc = (0..2).map(|i| r[i] * h[i] * cell.u_c.at(i, j)).sum::<f64>();
                let c = (xw(2 * hd + j) + rc).tanh();
                (1.0 - u[j]) * h[j] + u[j] * c
            })
            .collect();
        assert!(relative_error(tape.value(out).data(), &expect) < 1e-14);
    }

    #[test]
    fn gru_weight_gradients_match_finite_differences() {
        let cell = GruCell::uniform(3, 2, &mut rng(9));
        let xs: Vec<Tensor> = (0..3)
            .map(|t| Tensor::matrix(1, 3, vec![t as f64, 1.0, 0.5 - t as f64]).unwrap())
            .collect();
        let loss_of = |c: &GruCell, tape: &mut Tape| -> (BoundGru, Var) {
            let b = c.bind(tape);
            let xv: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let hs = c.encode_sequence(tape, b, &xv).unwrap();
            let sq = tape.square(*hs.last().unwrap()).unwrap();
            (b, tape.sum(sq).unwrap())
        };
        let mut tape = Tape::new();
        let (b, loss) = loss_of(&cell, &mut tape);
        let grads = tape.backward(loss).unwrap();
        for which in 0..4 {
            let var = [b.w_x, b.u_ru, b.u_c, b.bias][which];
            let base = [&cell.w_x, &cell.u_ru, &cell.u_c, &cell.bias][which].clone();
            let fd = finite_difference(base.data(), 1e-6, |p| {
                let mut c = cell.clone();
                let t = [&mut c.w_x, &mut c.u_ru, &mut c.u_c, &mut c.bias];
                t.into_iter().nth(which).unwrap().data_mut().copy_from_slice(p);
                let mut tape = Tape::new();
                let (_, l) = loss_of(&c, &mut tape);
                tape.value(l).item()
            });
            let err = relative_error(grads.get(var).unwrap().data(), &fd);
            assert!(err < 1e-5, "param {which}: {err}");
        }
    }

    #[test]
    fn sequence_of_zeros_stays_zero_and_empty_fails() {
        let cell = GruCell::zeros(4, 3);
        let mut tape = Tape::new();
        let b = cell.bind(&mut tape);
        let xs: Vec<Var> = (0..5).map(|_| tape.constant(Tensor::zeros(&[2, 4]))).collect();
        let hs = cell.encode_sequence(&mut tape, b, &xs).unwrap();
        assert_eq!(hs.len(), 5);
        assert!(hs.iter().all(|&h| tape.value(h).data().iter().all(|&v| v == 0.0)));
        assert!(matches!(cell.encode_sequence(&mut tape, b, &[]), Err(Error::Contract(_))));
        let one = cell.encode_sequence(&mut tape, b, &xs[..1]).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn batched_sequence_matches_per_row_steps() {
        let cell = GruCell::uniform(2, 3, &mut rng(5));
        let data = [[0.1, 2.0, -0.3, 1.0], [1.5, 0.2, 0.0, -1.0], [0.4, 0.4, 0.9, 0.0]];
        let mut tape = Tape::new();
        let b = cell.bind(&mut tape);
        let xs: Vec<Var> = data.iter().map(|r| tape.constant(Tensor::matrix(2, 2, r.to_vec()).unwrap())).collect();
        let hs = cell.encode_sequence(&mut tape, b, &xs).unwrap();
        for row in 0..2 {
            let mut h = tape.constant(Tensor::zeros(&[1, 3]));
            for r in &data {
                let x = tape.constant(Tensor::matrix(1, 2, r[2 * row..2 * row + 2].to_vec()).unwrap());
                h = cell.gru_step(&mut tape, b, x, h).unwrap();
            }
            let batched = tape.value(*hs.last().unwrap()).row(row).to_vec();
            assert!(relative_error(&batched, tape.value(h).data()) < 1e-14);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let cell = GruCell::zeros(3, 2);
        let mut tape = Tape::new();
        let b = cell.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let h = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(cell.gru_step(&mut tape, b, x, h), Err(Error::Dimension(_))));
    }

    fn head_with_output(mu: f64, logvar: f64, d: usize) -> InitialLatentHead {
        let mut lin = Linear::zeros(1, 4 * d);
        for j in 0..d {
            lin.bias.data_mut()[j] = mu;
            lin.bias.data_mut()[d + j] = logvar;
            lin.bias.data_mut()[2 * d + j] = mu;
            lin.bias.data_mut()[3 * d + j] = logvar;
        }
        InitialLatentHead::new(lin, d, true).unwrap()
    }

    fn kls(head: &InitialLatentHead, noise: &mut dyn NoiseSource) -> (f64, f64, Vec<f64>) {
        let mut tape = Tape::new();
        let b = head.linear.bind(&mut tape);
        let h0 = tape.constant(Tensor::zeros(&[1, 1]));
        let out = head.init_latents(&mut tape, b, h0, noise).unwrap();
        (
            tape.value(out.kl_z).item(),
            tape.value(out.kl_v.unwrap()).item(),
            tape.value(out.z0).data().to_vec(),
        )
    }

    #[test]
    fn closed_form_initial_kl() {
        let (kz, kv, _) = kls(&head_with_output(0.0, 0.0, 3), &mut NoNoise);
        assert_eq!((kz, kv), (0.0, 0.0));
        let (kz, kv, _) = kls(&head_with_output(1.0, 0.0, 3), &mut NoNoise);
        assert!((kz - 1.5).abs() < 1e-15 && (kv - 1.5).abs() < 1e-15);
    }

    #[test]
    fn tiny_variance_sample_equals_mean() {
        let head = head_with_output(0.7, -30.0, 4);
        let mut noise = RowStreams::new(vec![rng(1)]);
        let (_, _, z) = kls(&head, &mut noise);
        // logσ² is clamped to -10, so σ ≈ 6.7e-3
        assert!(z.iter().all(|v| (v - 0.7).abs() < 0.05));
        let head = head_with_output(0.7, -10.0, 4);
        let (kz, _, _) = kls(&head, &mut NoNoise);
        let expect = 4.0 * 0.5 * (0.49 + (-10.0f64).exp() - 1.0 + 10.0);
        assert!((kz - expect).abs() < 1e-12);
    }

    #[test]
    fn reparameterized_moments() {
        let (mu, lv) = (0.4, (0.25f64).ln());
        let head = head_with_output(mu, lv, 1);
        let n = 10_000;
        let mut tape = Tape::new();
        let b = head.linear.bind(&mut tape);
        let h0 = tape.constant(Tensor::zeros(&[n, 1]));
        let streams = (0..n as u64).map(|i| rng(100 + i)).collect();
        let out = head.init_latents(&mut tape, b, h0, &mut RowStreams::new(streams)).unwrap();
        let z = tape.value(out.z0).data();
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = 0.5;
        assert!((mean - mu).abs() < 3.0 * sd / (n as f64).sqrt());
        // standard error of the sample variance is σ²·sqrt(2/(n−1))
        assert!((var - 0.25).abs() < 3.0 * 0.25 * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn linear_encoder_is_per_bin_affine() {
        let lin = Linear::uniform(2, 3, &mut rng(4));
        let enc = Encoder::Linear(lin.clone());
        let mut tape = Tape::new();
        let b = enc.bind(&mut tape);
        let x = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        let xs: Vec<Var> = (0..3).map(|_| tape.constant(x.clone())).collect();
        let hs = enc.encode(&mut tape, b, &xs).unwrap();
        let expect: Vec<f64> = (0..3)
            .map(|j| lin.weight.at(0, j) - 2.0 * lin.weight.at(1, j) + lin.bias.at(0, j))
            .collect();
        for h in hs {
            assert!(relative_error(tape.value(h).data(), &expect) < 1e-15);
        }
    }

    #[test]
    fn first_order_head_has_no_velocity() {
        let head = InitialLatentHead::uniform(3, 2, false, &mut rng(2));
        assert_eq!(head.linear.output_dim(), 4);
        let mut tape = Tape::new();
        let b = head.linear.bind(&mut tape);
        let h0 = tape.constant(Tensor::full(&[2, 3], 0.1));
        let out = head.init_latents(&mut tape, b, h0, &mut NoNoise).unwrap();
        assert!(out.v0.is_none() && out.kl_v.is_none());
        assert_eq!(tape.shape(out.z0), &[2, 2]);
    }
}
