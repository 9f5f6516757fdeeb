//! The coupled-oscillator potential: symmetry, scale invariance and the
//! spectral norm against a dense oracle.

use langevinflow::potential::OscillatorPotential;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> langevinflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 16;
    let pot = OscillatorPotential::random(2, 7, &mut rng)?;
    println!("kernels (two groups, mirrored):\n{:?}", pot.full_kernels());
    println!("spectral norms per group: {:?}", pot.spectral_norm(d / 2));

    // dense operator, reconstructed column by column from the gradient
    let mut w = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let g = pot.grad_z(&e)?;
        for i in 0..d {
            w[(i, j)] = 0.5 * g[i];
        }
    }
    println!("operator symmetric: {}", (&w - w.transpose()).amax() < 1e-12);
    let eig = w.symmetric_eigenvalues();
    println!("normalized eigenvalue range [{:.4}, {:.4}]", eig.min(), eig.max());

    let z: Vec<f64> = (0..d).map(|i| (i as f64 * 0.7).sin()).collect();
    let u = pot.energy(&z)?;
    let scaled = OscillatorPotential::new(2, 7, {
        let mut k = pot.kernel_half().clone();
        k.data_mut().iter_mut().for_each(|x| *x *= 5.0);
        k
    })?;
    println!("U(z) = {u:.6}, with kernel x5: {:.6}", scaled.energy(&z)?);
    Ok(())
}
