//! Discrete underdamped Langevin updates for the latent posterior.
//!
//! One transition is split into a deterministic Hamiltonian step
//!
//! ```text
//! z_{t+1}   = z_t + v_t · dt
//! v_{t+1/2} = v_t − ∇U(z_t) / m · dt
//! ```
//!
//! (both right-hand sides use the pre-update state) followed by an
//! Ornstein–Uhlenbeck relaxation
//!
//! ```text
//! v_{t+1} = (1 − γ) v_{t+1/2} + sqrt(2 m γ k_B τ) ε,   ε ~ N(0, I)
//! ```
//!
//! sampled with the re-parameterization trick. All states are
//! `rows × d` tape values, one row per trial.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::{BoundPotential, OscillatorPotential};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangevinParams {
    pub gamma: f64,
    pub mass: f64,
    pub k_b: f64,
    pub tau: f64,
    pub dt: f64,
}

impl Default for LangevinParams {
    fn default() -> Self {
        Self {
            gamma: 0.7,
            mass: 1.0,
            k_b: 1.0,
            tau: 1.0,
            dt: 1.0,
        }
    }
}

impl LangevinParams {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        for (name, v) in [("mass", self.mass), ("k_B", self.k_b), ("tau", self.tau), ("dt", self.dt)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Transition variance `2 m γ k_B τ`.
    pub fn transition_variance(&self) -> f64 {
        2.0 * self.mass * self.gamma * self.k_b * self.tau
    }

    pub fn noise_scale(&self) -> f64 {
        self.transition_variance().sqrt()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LangevinState {
    pub z: Var,
    pub v: Var,
    pub t: usize,
}

/// Source of standard-normal draws for the stochastic step.
pub trait NoiseSource {
    /// A `rows × cols` standard-normal draw, or `None` to use the mean.
    fn draw(&mut self, rows: usize, cols: usize) -> Option<Tensor>;
}

/// Evaluation mode: the noise term is replaced by its mean.
pub struct NoNoise;

impl NoiseSource for NoNoise {
    fn draw(&mut self, _: usize, _: usize) -> Option<Tensor> {
        None
    }
}

/// One independent stream per row, so a trial's draws do not depend on
/// which other trials share its batch.
pub struct RowStreams {
    streams: Vec<ChaCha8Rng>,
}

impl RowStreams {
    pub fn new(streams: Vec<ChaCha8Rng>) -> Self {
        Self { streams }
    }
}

impl NoiseSource for RowStreams {
    fn draw(&mut self, rows: usize, cols: usize) -> Option<Tensor> {
        assert_eq!(rows, self.streams.len(), "one noise stream per row");
        let mut data = Vec::with_capacity(rows * cols);
        for rng in &mut self.streams {
            data.extend((0..cols).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
        Some(Tensor::matrix(rows, cols, data).expect("noise shape"))
    }
}

fn check_finite(tape: &Tape, vars: &[Var], step: usize) -> Result<()> {
    for &v in vars {
        if !tape.value(v).is_finite() {
            return Err(Error::Numeric {
                step,
                msg: "latent state is not finite".into(),
            });
        }
    }
    Ok(())
}

/// Hamiltonian half of a transition. Returns `(z_{t+1}, v_{t+1/2})` as a
/// state at index `t + 1`. `input` couples the potential to the spike
/// vector at step `t` when the potential carries `W_x`.
pub fn deterministic_step(
    tape: &mut Tape,
    state: LangevinState,
    params: &LangevinParams,
    pot: &OscillatorPotential,
    bound: BoundPotential,
    input: Option<Var>,
) -> Result<LangevinState> {
    check_finite(tape, &[state.z, state.v], state.t)?;
    let grad = pot.grad_tape(tape, bound, state.z, input)?;
    let dz = tape.scale(state.v, params.dt)?;
    let z = tape.add(state.z, dz)?;
    let dv = tape.scale(grad, params.dt / params.mass)?;
    let v = tape.sub(state.v, dv)?;
    check_finite(tape, &[z, v], state.t + 1)?;
    Ok(LangevinState { z, v, t: state.t + 1 })
}

/// Ornstein–Uhlenbeck half. Returns `(v_{t+1}, μ_q)` with
/// `μ_q = (1 − γ) v_{t+1/2}` the transition mean.
pub fn ou_step(tape: &mut Tape, v_half: Var, params: &LangevinParams, noise: &mut dyn NoiseSource) -> Result<(Var, Var)> {
    let mu = tape.scale(v_half, 1.0 - params.gamma)?;
    let (rows, cols) = (tape.value(v_half).rows(), tape.value(v_half).cols());
    let v_next = match noise.draw(rows, cols) {
        Some(eps) => {
            let eps = tape.constant(eps.reshape(tape.shape(v_half))?);
            let kick = tape.scale(eps, params.noise_scale())?;
            tape.add(mu, kick)?
        }
        None => mu,
    };
    Ok((v_next, mu))
}

/// `KL(N(μ, σ² I) ‖ N(0, I))` summed over all entries of `mu`.
pub fn gaussian_kl(mu: &[f64], var: f64) -> f64 {
    mu.iter().map(|m| 0.5 * (m * m + var - 1.0 - var.ln())).sum()
}

/// Velocity-transition KL against the standard-normal prior, summed over
/// rows and dimensions. The posterior variance is fixed by the dynamics, so
/// only `μ_q` carries gradient.
pub fn kl_velocity_step(tape: &mut Tape, mu_q: Var, params: &LangevinParams) -> Result<Var> {
    let var = params.transition_variance();
    if var <= 0.0 {
        return Err(Error::Domain(format!(
            "velocity KL undefined for transition variance {var}"
        )));
    }
    let n = tape.value(mu_q).len() as f64;
    let sq = tape.square(mu_q)?;
    let s = tape.sum(sq)?;
    let half = tape.scale(s, 0.5)?;
    tape.add_scalar(half, 0.5 * n * (var - 1.0 - var.ln()))
}

/// Gradient-flow update `z − ∇U(z) · dt` without a velocity variable.
pub fn first_order_step(
    tape: &mut Tape,
    z: Var,
    dt: f64,
    pot: &OscillatorPotential,
    bound: BoundPotential,
    input: Option<Var>,
) -> Result<Var> {
    let grad = pot.grad_tape(tape, bound, z, input)?;
    let step = tape.scale(grad, dt)?;
    tape.sub(z, step)
}

/// Trajectory produced by [`rollout`]: `zs` and `vs` hold `steps + 1`
/// states, `mus` the `steps` transition means.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub zs: Vec<Var>,
    pub vs: Vec<Var>,
    pub mus: Vec<Var>,
}

/// Alternates [`deterministic_step`] and [`ou_step`] `steps` times.
/// `inputs[t]`, when given, is the spike input of step `t`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    tape: &mut Tape,
    init: LangevinState,
    params: &LangevinParams,
    pot: &OscillatorPotential,
    bound: BoundPotential,
    steps: usize,
    noise: &mut dyn NoiseSource,
    inputs: Option<&[Var]>,
) -> Result<Trajectory> {
    let mut traj = Trajectory {
        zs: vec![init.z],
        vs: vec![init.v],
        mus: Vec::with_capacity(steps),
    };
    let mut state = init;
    for i in 0..steps {
        let x = inputs.map(|xs| xs[i]);
        let half = deterministic_step(tape, state, params, pot, bound, x)?;
        let (v, mu) = ou_step(tape, half.v, params, noise)?;
        state = LangevinState { z: half.z, v, t: half.t };
        traj.zs.push(state.z);
        traj.vs.push(state.v);
        traj.mus.push(mu);
    }
    Ok(traj)
}

/// `H = U(z)/m + ½‖v‖²` for a single state.
pub fn hamiltonian(pot: &OscillatorPotential, z: &[f64], v: &[f64], mass: f64) -> Result<f64> {
    Ok(pot.energy(z)? / mass + 0.5 * v.iter().map(|x| x * x).sum::<f64>())
}

/// Dense Jacobian of `(z, v) ↦ (z_{t+1}, v_{t+1/2})` for one state, one
/// reverse sweep per output coordinate.
pub fn deterministic_jacobian(
    pot: &OscillatorPotential,
    params: &LangevinParams,
    z: &[f64],
    v: &[f64],
) -> Result<DMatrix<f64>> {
    let d = z.len();
    if v.len() != d {
        return Err(Error::dim("z and v lengths differ"));
    }
    let mut tape = Tape::new();
    let zv = tape.leaf(Tensor::matrix(1, d, z.to_vec())?);
    let vv = tape.leaf(Tensor::matrix(1, d, v.to_vec())?);
    let bound = BoundPotential {
        kernel_half: tape.constant(pot.kernel_half().clone()),
        input_coupling: None,
        normalized: None,
    };
    let next = deterministic_step(&mut tape, LangevinState { z: zv, v: vv, t: 0 }, params, pot, bound, None)?;
    let out = tape.concat(&[next.z, next.v], crate::tensor::Axis::Cols)?;
    let mut jac = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..2 * d {
        let e = tape.slice_cols(out, i..i + 1)?;
        let s = tape.sum(e)?;
        let g = tape.backward(s)?;
        for j in 0..d {
            jac[(i, j)] = g.get(zv).unwrap().data()[j];
            jac[(i, d + j)] = g.get(vv).unwrap().data()[j];
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use rand::SeedableRng;

    fn state(tape: &mut Tape, z: &[f64], v: &[f64]) -> LangevinState {
        LangevinState {
            z: tape.leaf(Tensor::matrix(1, z.len(), z.to_vec()).unwrap()),
            v: tape.leaf(Tensor::matrix(1, v.len(), v.to_vec()).unwrap()),
            t: 0,
        }
    }

    fn zero_potential() -> OscillatorPotential {
        OscillatorPotential::new(1, 7, Tensor::zeros(&[1, 4])).unwrap()
    }

    #[test]
    fn params_validation_and_noise_scale() {
        let p = LangevinParams::with_gamma(0.6);
        p.validate().unwrap();
        assert!((p.noise_scale().powi(2) - 2.0 * 0.6).abs() < 1e-15);
        assert!(LangevinParams::with_gamma(1.2).validate().is_err());
        assert!(LangevinParams { dt: 0.0, ..p }.validate().is_err());
    }

    #[test]
    fn free_flight_with_zero_potential() {
        let pot = zero_potential();
        let mut tape = Tape::new();
        let b = pot.bind(&mut tape);
        let s = state(&mut tape, &[1.0, 2.0], &[0.5, -1.0]);
        let p = LangevinParams { dt: 0.1, ..LangevinParams::default() };
        let n = deterministic_step(&mut tape, s, &p, &pot, b, None).unwrap();
        assert_eq!(tape.value(n.z).data(), &[1.05, 1.9]);
        assert_eq!(tape.value(n.v).data(), &[0.5, -1.0]);
        assert_eq!(n.t, 1);
    }

    #[test]
    fn impulse_kernel_hand_step() {
        let pot = OscillatorPotential::impulse(1, 7).unwrap();
        let mut tape = Tape::new();
        let b = pot.bind(&mut tape);
        let s = state(&mut tape, &[1.0, 0.0], &[0.0, 0.0]);
        let n = deterministic_step(&mut tape, s, &LangevinParams::default(), &pot, b, None).unwrap();
        assert_eq!(tape.value(n.z).data(), &[1.0, 0.0]);
        assert_eq!(tape.value(n.v).data(), &[-2.0, 0.0]);
    }

    #[test]
    fn equilibrium_is_fixed() {
        let pot = OscillatorPotential::impulse(2, 7).unwrap();
        let mut tape = Tape::new();
        let b = pot.bind(&mut tape);
        let s = state(&mut tape, &[0.0; 4], &[0.0; 4]);
        let n = deterministic_step(&mut tape, s, &LangevinParams::default(), &pot, b, None).unwrap();
        assert_eq!(tape.value(n.z).data(), &[0.0; 4]);
        assert_eq!(tape.value(n.v).data(), &[0.0; 4]);
    }

    #[test]
    fn non_finite_state_reports_step() {
        let pot = OscillatorPotential::impulse(1, 7).unwrap();
        let mut tape = Tape::new();
        let b = pot.bind(&mut tape);
        let mut s = state(&mut tape, &[f64::NAN, 0.0], &[0.0, 0.0]);
        s.t = 5;
        match deterministic_step(&mut tape, s, &LangevinParams::default(), &pot, b, None) {
            Err(Error::Numeric { step, .. }) => assert_eq!(step, 5),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn ou_limits() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]).unwrap());
        let mut noise = RowStreams::new(vec![substream(1, Stream::OuNoise, 0, 0)]);
        let (next, mu) = ou_step(&mut tape, v, &LangevinParams::with_gamma(0.0), &mut noise).unwrap();
        assert_eq!(tape.value(next).data(), tape.value(v).data());
        assert_eq!(tape.value(mu).data(), tape.value(v).data());

        let mut noise = RowStreams::new(vec![substream(2, Stream::OuNoise, 0, 0)]);
        let (next, mu) = ou_step(&mut tape, v, &LangevinParams::with_gamma(1.0), &mut noise).unwrap();
        assert_eq!(tape.value(mu).data(), &[0.0, 0.0, 0.0]);
        let mut check = substream(2, Stream::OuNoise, 0, 0);
        for &x in tape.value(next).data() {
            let eps: f64 = check.sample(StandardNormal);
            assert!((x - 2f64.sqrt() * eps).abs() < 1e-15);
        }
    }

    #[test]
    fn ou_stationary_variance() {
        // σ² = (1−γ)²σ² + 2γ  ⇒  σ² = 2γ / (1 − (1−γ)²)
        let gamma = 0.5;
        let p = LangevinParams::with_gamma(gamma);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut v = 0.0;
        let mut acc = Vec::with_capacity(100_000);
        let scale = p.noise_scale();
        for i in 0..101_000 {
            let eps: f64 = rng.sample(StandardNormal);
            v = (1.0 - gamma) * v + scale * eps;
            if i >= 1000 {
                acc.push(v);
            }
        }
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        let var = acc.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / acc.len() as f64;
        let target = 2.0 * gamma / (1.0 - (1.0 - gamma).powi(2));
        assert!((target - 4.0 / 3.0).abs() < 1e-12);
        assert!((var - target).abs() / target < 0.05, "{var}");
    }

    #[test]
    fn reparameterized_gradient_is_one_minus_gamma() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let p = LangevinParams::with_gamma(0.65);
        let mut noise = RowStreams::new(vec![substream(3, Stream::OuNoise, 0, 0)]);
        let (next, _) = ou_step(&mut tape, v, &p, &mut noise).unwrap();
        let m = tape.mean(next).unwrap();
        let g = tape.backward(m).unwrap();
        for &x in g.get(v).unwrap().data() {
            assert_eq!(x * 4.0, 1.0 - 0.65);
        }
    }

    #[test]
    fn velocity_kl_closed_forms() {
        assert_eq!(gaussian_kl(&[0.0], 1.0), 0.0);
        assert!((gaussian_kl(&[0.5], 1.0) - 0.125).abs() < 1e-15);
        assert!((gaussian_kl(&[0.0], 2.0) - 0.5 * (1.0 - 2f64.ln())).abs() < 1e-15);
        assert!((gaussian_kl(&[0.0], 2.0) - 0.15343).abs() < 1e-5);

        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let kl = kl_velocity_step(&mut tape, mu, &LangevinParams::with_gamma(0.5)).unwrap();
        assert!((tape.value(kl).item() - 0.125).abs() < 1e-15);
        let g = tape.backward(kl).unwrap();
        assert_eq!(g.get(mu).unwrap().item(), 0.5);

        let mu0 = tape.leaf(Tensor::zeros(&[1, 3]));
        let kl = kl_velocity_step(&mut tape, mu0, &LangevinParams::with_gamma(0.5)).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
        assert!(kl_velocity_step(&mut tape, mu0, &LangevinParams::with_gamma(0.0)).is_err());
    }

    #[test]
    fn rollout_single_step_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pot = OscillatorPotential::random(2, 7, &mut rng).unwrap();
        let p = LangevinParams::default();
        let mut tape = Tape::new();
        let b = pot.bind(&mut tape);
        let s = state(&mut tape, &[0.1, 0.2, 0.3, 0.4], &[0.0, 1.0, 0.0, -1.0]);
        let mut n1 = RowStreams::new(vec![substream(9, Stream::OuNoise, 0, 0)]);
        let traj = rollout(&mut tape, s, &p, &pot, b, 1, &mut n1, None).unwrap();
        let half = deterministic_step(&mut tape, s, &p, &pot, b, None).unwrap();
        let mut n2 = RowStreams::new(vec![substream(9, Stream::OuNoise, 0, 0)]);
        let (v, mu) = ou_step(&mut tape, half.v, &p, &mut n2).unwrap();
        assert_eq!(tape.value(traj.zs[1]), tape.value(half.z));
        assert_eq!(tape.value(traj.vs[1]), tape.value(v));
        assert_eq!(tape.value(traj.mus[0]), tape.value(mu));
        assert_eq!(traj.zs.len(), 2);
    }

    #[test]
    fn free_flight_rollout_is_linear() {
        let pot = zero_potential();
        let p = LangevinParams {
            gamma: 0.0,
            dt: 0.5,
            ..LangevinParams::default()
        };
        let mut tape = Tape::new();
        let b = pot.bind(&mut tape);
        let s = state(&mut tape, &[1.0, 0.0, -1.0], &[0.25, 0.5, 1.0]);
        let traj = rollout(&mut tape, s, &p, &pot, b, 10, &mut NoNoise, None).unwrap();
        for (t, &z) in traj.zs.iter().enumerate() {
            for (i, &zi) in tape.value(z).data().iter().enumerate() {
                let expect = [1.0, 0.0, -1.0][i] + t as f64 * [0.25, 0.5, 1.0][i] * 0.5;
                assert!((zi - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rollout_is_deterministic_for_a_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let pot = OscillatorPotential::random(2, 7, &mut rng).unwrap();
            let mut tape = Tape::new();
            let b = pot.bind(&mut tape);
            let s = state(&mut tape, &[0.1, 0.2, 0.3, 0.4], &[0.0; 4]);
            let mut noise = RowStreams::new(vec![substream(4, Stream::OuNoise, 1, 2)]);
            let traj = rollout(&mut tape, s, &LangevinParams::default(), &pot, b, 20, &mut noise, None).unwrap();
            traj.zs.iter().map(|&z| tape.value(z).clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn first_order_cases() {
        let pot = OscillatorPotential::impulse(1, 7).unwrap();
        let mut tape = Tape::new();
        let b = pot.bind(&mut tape);
        let z = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let n = first_order_step(&mut tape, z, 1.0, &pot, b, None).unwrap();
        assert_eq!(tape.value(n).data(), &[-1.0, 0.0]);
        let zero = zero_potential();
        let b0 = zero.bind(&mut tape);
        let n = first_order_step(&mut tape, z, 1.0, &zero, b0, None).unwrap();
        assert_eq!(tape.value(n).data(), &[1.0, 0.0]);
    }

    #[test]
    fn jacobian_determinant_is_one_plus_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pot = OscillatorPotential::random(2, 7, &mut rng).unwrap();
        let z: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dev: Vec<f64> = [0.1, 0.01]
            .iter()
            .map(|&dt| {
                let p = LangevinParams { dt, ..LangevinParams::default() };
                (deterministic_jacobian(&pot, &p, &z, &v).unwrap().determinant() - 1.0).abs()
            })
            .collect();
        // det(I + 2 dt² W/‖W‖) ≈ 1 + 2 dt² tr(W/‖W‖); tr ≤ d
        assert!(dev[0] < 2.0 * 8.0 * 0.01 * 1.1);
        assert!(dev[1] < dev[0] / 50.0);
    }
}
