//! Simulates the latent Langevin dynamics directly: energy behaviour of the
//! deterministic step, Jacobian determinant, and the OU velocity variance.

use langevinflow::langevin::{
    deterministic_jacobian, hamiltonian, ou_step, rollout, LangevinParams, LangevinState, NoNoise, RowStreams,
};
use langevinflow::potential::OscillatorPotential;
use langevinflow::rng::{substream, Stream};
use langevinflow::{Tape, Tensor};

fn main() -> langevinflow::Result<()> {
    let pot = OscillatorPotential::impulse(1, 7)?;
    let (z0, v0) = (vec![1.0, 0.5, -0.3, 0.2], vec![0.0; 4]);

    for dt in [0.01, 0.001] {
        let p = LangevinParams { gamma: 0.0, dt, ..LangevinParams::default() };
        let mut tape = Tape::new();
        let bound = pot.bind(&mut tape);
        let init = LangevinState {
            z: tape.constant(Tensor::matrix(1, 4, z0.clone())?),
            v: tape.constant(Tensor::matrix(1, 4, v0.clone())?),
            t: 0,
        };
        let traj = rollout(&mut tape, init, &p, &pot, bound, 1000, &mut NoNoise, None)?;
        let h0 = hamiltonian(&pot, &z0, &v0, 1.0)?;
        let drift = traj
            .zs
            .iter()
            .zip(&traj.vs)
            .map(|(&z, &v)| hamiltonian(&pot, tape.value(z).data(), tape.value(v).data(), 1.0).map(|h| (h - h0).abs() / h0))
            .try_fold(0.0f64, |m, h| h.map(|h| m.max(h)))?;
        println!("dt {dt}: max relative energy drift over 1000 steps {drift:.3e}");
    }

    for dt in [0.1, 0.05, 0.025] {
        let p = LangevinParams { dt, ..LangevinParams::default() };
        let det = deterministic_jacobian(&pot, &p, &z0, &v0)?.determinant();
        println!("dt {dt}: |det J - 1| = {:.3e}", (det - 1.0).abs());
    }

    for gamma in [0.25, 0.5, 0.75] {
        let p = LangevinParams::with_gamma(gamma);
        let mut noise = RowStreams::new(vec![substream(0, Stream::OuNoise, 0, 0)]);
        let (mut sum, mut sq, n) = (0.0, 0.0, 100_000);
        let mut v = Tensor::matrix(1, 1, vec![0.0])?;
        for _ in 0..n {
            let mut tape = Tape::new();
            let x = tape.constant(v);
            let (next, _) = ou_step(&mut tape, x, &p, &mut noise)?;
            v = tape.value(next).clone();
            sum += v.item();
            sq += v.item() * v.item();
        }
        let var = sq / n as f64 - (sum / n as f64).powi(2);
        let expect = 2.0 * gamma / (1.0 - (1.0 - gamma).powi(2));
        println!("gamma {gamma}: stationary variance {var:.4} (closed form {expect:.4})");
    }
    Ok(())
}
