//! Coupled-oscillator potential `U(z) = zᵀ (W / ‖W‖₂) z`.
//!
//! The latent vector is split into `groups` contiguous channels. Inside each
//! channel `W` is the banded Toeplitz operator of a palindromic kernel of odd
//! width, applied as a zero-padded convolution, so `W` is symmetric and
//! `∇U = 2 W z / ‖W‖₂`. `‖W‖₂` is the largest singular value of the
//! channel's operator, estimated by power iteration and treated as a
//! constant when differentiating.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Axis, Tape, Tensor, Var};

const POWER_MAX_ITERS: usize = 500;
const POWER_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct OscillatorPotential {
    groups: usize,
    kernel_size: usize,
    /// `groups × (kernel_size+1)/2`; column 0 is the center tap, column `j`
    /// the tap at offset `±j`.
    kernel_half: Tensor,
    /// `d × n_inputs` coupling of latents to the current spike vector.
    input_coupling: Option<Tensor>,
    /// Norms to use instead of power iteration, e.g. to probe the
    /// fixed-norm surrogate that the tape differentiates.
    frozen_norms: Option<Vec<f64>>,
}

/// Tape handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BoundPotential {
    pub kernel_half: Var,
    pub input_coupling: Option<Var>,
    /// Normalized full kernels and the group length they were built for.
    pub normalized: Option<(Var, usize)>,
}

impl OscillatorPotential {
    pub fn new(groups: usize, kernel_size: usize, kernel_half: Tensor) -> Result<Self> {
        if kernel_size % 2 == 0 || kernel_size == 0 {
            return Err(Error::config(format!("kernel size {kernel_size} must be odd")));
        }
        if groups == 0 {
            return Err(Error::config("potential needs at least one group"));
        }
        let half = kernel_size.div_ceil(2);
        if kernel_half.shape() != [groups, half] {
            return Err(Error::dim(format!(
                "half-kernel shape {:?}, expected [{groups}, {half}]",
                kernel_half.shape()
            )));
        }
        Ok(Self {
            groups,
            kernel_size,
            kernel_half,
            input_coupling: None,
            frozen_norms: None,
        })
    }

    /// Center tap `1`, everything else zero: `W = I`.
    pub fn impulse(groups: usize, kernel_size: usize) -> Result<Self> {
        let half = kernel_size.div_ceil(2);
        let mut k = Tensor::zeros(&[groups, half]);
        for g in 0..groups {
            k.data_mut()[g * half] = 1.0;
        }
        Self::new(groups, kernel_size, k)
    }

    /// Small uniform taps in `±0.1` around a unit center tap, so the
    /// operator starts close to the identity with `‖W‖₂ ≈ 1`.
    pub fn random(groups: usize, kernel_size: usize, rng: &mut impl Rng) -> Result<Self> {
        let half = kernel_size.div_ceil(2);
        let data = (0..groups * half)
            .map(|i| {
                let center = if i % half == 0 { 1.0 } else { 0.0 };
                center + rng.random_range(-0.1..0.1)
            })
            .collect();
        Self::new(groups, kernel_size, Tensor::matrix(groups, half, data)?)
    }

    pub fn with_input_coupling(mut self, w_x: Tensor) -> Self {
        self.input_coupling = Some(w_x);
        self
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn kernel_half(&self) -> &Tensor {
        &self.kernel_half
    }

    pub fn kernel_half_mut(&mut self) -> &mut Tensor {
        &mut self.kernel_half
    }

    pub fn input_coupling(&self) -> Option<&Tensor> {
        self.input_coupling.as_ref()
    }

    pub fn input_coupling_mut(&mut self) -> Option<&mut Tensor> {
        self.input_coupling.as_mut()
    }

    /// Both parameter tensors, mutably.
    pub fn params_mut(&mut self) -> (&mut Tensor, Option<&mut Tensor>) {
        (&mut self.kernel_half, self.input_coupling.as_mut())
    }

    /// Column indices expanding a half kernel into the palindromic full one.
    pub fn mirror_index(&self) -> Vec<usize> {
        let center = (self.kernel_size - 1) / 2;
        (0..self.kernel_size).map(|j| j.abs_diff(center)).collect()
    }

    /// `groups × kernel_size` palindromic kernels.
    pub fn full_kernels(&self) -> Tensor {
        let half = self.kernel_half.cols();
        let idx = self.mirror_index();
        let mut data = Vec::with_capacity(self.groups * self.kernel_size);
        for g in 0..self.groups {
            let row = &self.kernel_half.data()[g * half..(g + 1) * half];
            data.extend(idx.iter().map(|&i| row[i]));
        }
        Tensor::matrix(self.groups, self.kernel_size, data).expect("kernel shape")
    }

    fn group_len(&self, d: usize) -> Result<usize> {
        if d == 0 || d % self.groups != 0 {
            return Err(Error::dim(format!(
                "latent dimension {d} not divisible by {} groups",
                self.groups
            )));
        }
        Ok(d / self.groups)
    }

    fn apply_group(kernel: &[f64], x: &[f64], out: &mut [f64]) {
        let pad = (kernel.len() - 1) / 2;
        let len = x.len();
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &k) in kernel.iter().enumerate() {
                let src = i + j;
                if src >= pad && src - pad < len {
                    acc += k * x[src - pad];
                }
            }
            *o = acc;
        }
    }

    /// Largest singular value of each group's `len × len` operator. An
    /// all-zero kernel reports `1`, which makes its potential vanish
    /// identically instead of dividing zero by zero.
    pub fn spectral_norm(&self, len: usize) -> Vec<f64> {
        if let Some(n) = &self.frozen_norms {
            return n.clone();
        }
        let full = self.full_kernels();
        (0..self.groups)
            .map(|g| {
                let k = full.row(g);
                if len == 0 || k.iter().all(|&x| x == 0.0) {
                    return 1.0;
                }
                // Power iteration on WᵀW = W²; the start vector is neither
                // symmetric nor antisymmetric, so it overlaps both
                // eigenvector families of a persymmetric operator.
                let mut x: Vec<f64> = (0..len).map(|i| 1.0 + i as f64 / len as f64).collect();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                x.iter_mut().for_each(|v| *v /= nx);
                let mut y = vec![0.0; len];
                let mut w = vec![0.0; len];
                let mut sigma = 0.0;
                for _ in 0..POWER_MAX_ITERS {
                    Self::apply_group(k, &x, &mut y);
                    Self::apply_group(k, &y, &mut w);
                    let next = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if nw == 0.0 {
                        sigma = next;
                        break;
                    }
                    x.iter_mut().zip(&w).for_each(|(xi, wi)| *xi = wi / nw);
                    let done = (next - sigma).abs() <= POWER_TOL * next;
                    sigma = next;
                    if done {
                        break;
                    }
                }
                if sigma > 0.0 {
                    sigma
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// Pins the norms to their current values for latent dimension `d`.
    pub fn freeze_norms(&mut self, d: usize) -> Result<()> {
        let len = self.group_len(d)?;
        self.frozen_norms = Some(self.spectral_norm(len));
        Ok(())
    }

    pub fn unfreeze_norms(&mut self) {
        self.frozen_norms = None;
    }

    /// `W z / ‖W‖₂`, group by group.
    fn normalized_apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        let len = self.group_len(z.len())?;
        let norms = self.spectral_norm(len);
        let full = self.full_kernels();
        let mut out = vec![0.0; z.len()];
        for g in 0..self.groups {
            let span = g * len..(g + 1) * len;
            Self::apply_group(full.row(g), &z[span.clone()], &mut out[span.clone()]);
            out[span].iter_mut().for_each(|v| *v /= norms[g]);
        }
        Ok(out)
    }

    pub fn energy(&self, z: &[f64]) -> Result<f64> {
        let wz = self.normalized_apply(z)?;
        Ok(z.iter().zip(&wz).map(|(a, b)| a * b).sum())
    }

    pub fn grad_z(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.normalized_apply(z)?.into_iter().map(|v| 2.0 * v).collect())
    }

    /// `U(z) + zᵀ W_x x`.
    pub fn energy_with_input(&self, z: &[f64], x: &[f64]) -> Result<f64> {
        let w_x = self
            .input_coupling
            .as_ref()
            .ok_or_else(|| Error::config("input coupling requested but W_x is absent"))?;
        if w_x.shape() != [z.len(), x.len()] {
            return Err(Error::dim(format!(
                "W_x is {:?}, need [{}, {}]",
                w_x.shape(),
                z.len(),
                x.len()
            )));
        }
        let mut bilinear = 0.0;
        for (i, &zi) in z.iter().enumerate() {
            let row = w_x.row(i);
            bilinear += zi * row.iter().zip(x).map(|(w, xv)| w * xv).sum::<f64>();
        }
        Ok(self.energy(z)? + bilinear)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundPotential {
        BoundPotential {
            kernel_half: tape.leaf(self.kernel_half.clone()),
            input_coupling: self.input_coupling.as_ref().map(|w| tape.leaf(w.clone())),
            normalized: None,
        }
    }

    /// Builds the normalized kernels for latent dimension `d` once, so
    /// repeated steps reuse them instead of re-running power iteration.
    pub fn prepare(&self, tape: &mut Tape, bound: BoundPotential, d: usize) -> Result<BoundPotential> {
        let len = self.group_len(d)?;
        let k = self.normalized_kernels(tape, bound, len)?;
        Ok(BoundPotential {
            normalized: Some((k, len)),
            ..bound
        })
    }

    /// Normalized full kernels on the tape; the norms enter as constants.
    fn normalized_kernels(&self, tape: &mut Tape, bound: BoundPotential, len: usize) -> Result<Var> {
        let full = tape.select_cols(bound.kernel_half, &self.mirror_index())?;
        let norms = self.spectral_norm(len);
        let mut inv = Tensor::zeros(&[self.groups, self.kernel_size]);
        for g in 0..self.groups {
            inv.data_mut()[g * self.kernel_size..(g + 1) * self.kernel_size].fill(1.0 / norms[g]);
        }
        let inv = tape.constant(inv);
        tape.mul(full, inv)
    }

    /// `W z / ‖W‖₂` for each row of `z: rows × d`.
    fn normalized_apply_tape(&self, tape: &mut Tape, bound: BoundPotential, z: Var) -> Result<Var> {
        let d = tape.value(z).cols();
        let len = self.group_len(d)?;
        let k = match bound.normalized {
            Some((k, l)) if l == len => k,
            _ => self.normalized_kernels(tape, bound, len)?,
        };
        tape.grouped_conv(z, k)
    }

    /// Row-wise `∇_z U` for `z: rows × d`; with `x: rows × n_inputs` the input
    /// coupling term `W_x x` is added.
    pub fn grad_tape(&self, tape: &mut Tape, bound: BoundPotential, z: Var, x: Option<Var>) -> Result<Var> {
        let wz = self.normalized_apply_tape(tape, bound, z)?;
        let g = tape.scale(wz, 2.0)?;
        match (x, bound.input_coupling) {
            (None, _) => Ok(g),
            (Some(x), Some(w_x)) => {
                let drive = tape.matmul_nt(x, w_x)?;
                tape.add(g, drive)
            }
            (Some(_), None) => Err(Error::config("input coupling requested but W_x is absent")),
        }
    }

    /// Row-wise energies (`rows × 1`).
    pub fn energy_tape(&self, tape: &mut Tape, bound: BoundPotential, z: Var, x: Option<Var>) -> Result<Var> {
        let wz = self.normalized_apply_tape(tape, bound, z)?;
        let quad = tape.mul(z, wz)?;
        let u = tape.sum_axis(quad, Axis::Cols)?;
        match (x, bound.input_coupling) {
            (None, _) => Ok(u),
            (Some(x), Some(w_x)) => {
                let drive = tape.matmul_nt(x, w_x)?;
                let bil = tape.mul(z, drive)?;
                let b = tape.sum_axis(bil, Axis::Cols)?;
                tape.add(u, b)
            }
            (Some(_), None) => Err(Error::config("input coupling requested but W_x is absent")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference, relative_error};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Materialized zero-padded Toeplitz matrix of a full kernel.
    fn dense_toeplitz(kernel: &[f64], len: usize) -> DMatrix<f64> {
        let pad = (kernel.len() - 1) as i64 / 2;
        DMatrix::from_fn(len, len, |i, j| {
            let off = j as i64 - i as i64 + pad;
            if (0..kernel.len() as i64).contains(&off) {
                kernel[off as usize]
            } else {
                0.0
            }
        })
    }

    fn dense_block(p: &OscillatorPotential, d: usize) -> DMatrix<f64> {
        let len = d / p.groups();
        let full = p.full_kernels();
        let mut m = DMatrix::zeros(d, d);
        for g in 0..p.groups() {
            let t = dense_toeplitz(full.row(g), len);
            let s = t.singular_values().max();
            m.view_mut((g * len, g * len), (len, len)).copy_from(&(t / s));
        }
        m
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn norm_of_impulse_and_scaled_impulse() {
        let p = OscillatorPotential::impulse(1, 7).unwrap();
        assert!((p.spectral_norm(8)[0] - 1.0).abs() < 1e-12);
        let k = Tensor::from_rows(&[&[2.0, 0.0, 0.0, 0.0]]).unwrap();
        let p = OscillatorPotential::new(1, 7, k).unwrap();
        assert!((p.spectral_norm(8)[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_kernel_norm_is_one_and_energy_vanishes() {
        let p = OscillatorPotential::new(2, 7, Tensor::zeros(&[2, 4])).unwrap();
        assert_eq!(p.spectral_norm(8), vec![1.0, 1.0]);
        assert_eq!(p.energy(&[1.0; 16]).unwrap(), 0.0);
    }

    #[test]
    fn power_iteration_matches_dense_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let k = Tensor::matrix(1, 4, random_vec(&mut rng, 4)).unwrap();
            let p = OscillatorPotential::new(1, 7, k).unwrap();
            let dense = dense_toeplitz(p.full_kernels().row(0), 16);
            let oracle = dense.singular_values().max();
            let est = p.spectral_norm(16)[0];
            assert!((est - oracle).abs() < 1e-6, "{est} vs {oracle}");
        }
    }

    #[test]
    fn circulant_bound_dominates_toeplitz_norm() {
        // max |DFT(kernel)| bounds the zero-padded operator's norm
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = Tensor::matrix(1, 4, random_vec(&mut rng, 4)).unwrap();
        let p = OscillatorPotential::new(1, 7, k).unwrap();
        let full = p.full_kernels();
        let bound = (0..512)
            .map(|f| {
                let w = 2.0 * std::f64::consts::PI * f as f64 / 512.0;
                full.row(0)
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| c * (w * (j as f64 - 3.0)).cos())
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max);
        let est = p.spectral_norm(64)[0];
        assert!(est <= bound + 1e-9);
        assert!(est > 0.9 * bound, "{est} vs {bound}");
    }

    #[test]
    fn energy_hand_cases() {
        let p = OscillatorPotential::impulse(1, 7).unwrap();
        assert!((p.energy(&[1.0, 2.0]).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(p.energy(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(p.energy(&[]), Err(Error::Dimension(_))));
        let p4 = OscillatorPotential::impulse(4, 7).unwrap();
        assert!(matches!(p4.energy(&[1.0; 6]), Err(Error::Dimension(_))));
    }

    #[test]
    fn energy_matches_dense_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = OscillatorPotential::new(4, 7, Tensor::matrix(4, 4, random_vec(&mut rng, 16)).unwrap()).unwrap();
        let z = random_vec(&mut rng, 32);
        let m = dense_block(&p, 32);
        let zv = nalgebra::DVector::from_vec(z.clone());
        let oracle = (zv.transpose() * &m * &zv)[(0, 0)];
        assert!((p.energy(&z).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn grad_hand_cases_and_finite_differences() {
        let p = OscillatorPotential::impulse(2, 7).unwrap();
        let z = [0.5, -1.0, 2.0, 3.0];
        assert_eq!(p.grad_z(&z).unwrap(), vec![1.0, -2.0, 4.0, 6.0]);
        assert_eq!(p.grad_z(&[0.0; 4]).unwrap(), vec![0.0; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = OscillatorPotential::new(4, 7, Tensor::matrix(4, 4, random_vec(&mut rng, 16)).unwrap()).unwrap();
        let z = random_vec(&mut rng, 32);
        let fd = finite_difference(&z, 1e-5, |x| p.energy(x).unwrap());
        assert!(relative_error(&p.grad_z(&z).unwrap(), &fd) < 1e-5);
    }

    #[test]
    fn input_coupling_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let base = OscillatorPotential::new(2, 7, Tensor::matrix(2, 4, random_vec(&mut rng, 8)).unwrap()).unwrap();
        assert!(matches!(base.energy_with_input(&[1.0; 8], &[1.0; 3]), Err(Error::Config(_))));

        let z = random_vec(&mut rng, 8);
        let x = random_vec(&mut rng, 3);
        let p0 = base.clone().with_input_coupling(Tensor::zeros(&[8, 3]));
        assert!((p0.energy_with_input(&z, &x).unwrap() - base.energy(&z).unwrap()).abs() < 1e-15);
        let w = Tensor::matrix(8, 3, random_vec(&mut rng, 24)).unwrap();
        let p = base.clone().with_input_coupling(w.clone());
        assert_eq!(p.energy_with_input(&[0.0; 8], &x).unwrap(), 0.0);

        let zv = nalgebra::DVector::from_vec(z.clone());
        let xv = nalgebra::DVector::from_vec(x.clone());
        let wm = DMatrix::from_row_slice(8, 3, w.data());
        let oracle = (zv.transpose() * dense_block(&base, 8) * &zv)[(0, 0)] + (zv.transpose() * wm * xv)[(0, 0)];
        assert!((p.energy_with_input(&z, &x).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn tape_paths_agree_with_plain_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let p = OscillatorPotential::new(4, 7, Tensor::matrix(4, 4, random_vec(&mut rng, 16)).unwrap())
            .unwrap()
            .with_input_coupling(Tensor::matrix(16, 5, random_vec(&mut rng, 80)).unwrap());
        let z = random_vec(&mut rng, 32);
        let x = random_vec(&mut rng, 10);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let zv = tape.constant(Tensor::matrix(2, 16, z.clone()).unwrap());
        let xv = tape.constant(Tensor::matrix(2, 5, x.clone()).unwrap());
        let u = p.energy_tape(&mut tape, b, zv, Some(xv)).unwrap();
        let g = p.grad_tape(&mut tape, b, zv, None).unwrap();
        for r in 0..2 {
            let zr = &z[r * 16..(r + 1) * 16];
            let xr = &x[r * 5..(r + 1) * 5];
            assert!((tape.value(u).data()[r] - p.energy_with_input(zr, xr).unwrap()).abs() < 1e-12);
            let gp = p.grad_z(zr).unwrap();
            for (a, b) in tape.value(g).row(r).iter().zip(&gp) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_gradient_flows_through_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = OscillatorPotential::new(2, 7, Tensor::matrix(2, 4, random_vec(&mut rng, 8)).unwrap()).unwrap();
        let z = Tensor::matrix(3, 8, random_vec(&mut rng, 24)).unwrap();
        let w = Tensor::matrix(3, 8, random_vec(&mut rng, 24)).unwrap();
        let loss = |p: &OscillatorPotential, tape: &mut Tape| -> (BoundPotential, Var) {
            let b = p.bind(tape);
            let zv = tape.constant(z.clone());
            let wv = tape.constant(w.clone());
            let g = p.grad_tape(tape, b, zv, None).unwrap();
            let m = tape.mul(g, wv).unwrap();
            (b, tape.sum(m).unwrap())
        };
        let mut tape = Tape::new();
        let (b, l) = loss(&p, &mut tape);
        let analytic = tape.backward(l).unwrap().get(b.kernel_half).unwrap().data().to_vec();
        // norms held fixed at the unperturbed kernel
        let norms = p.spectral_norm(4);
        let fd = finite_difference(p.kernel_half.data(), 1e-5, |k| {
            let q = OscillatorPotential::new(2, 7, Tensor::matrix(2, 4, k.to_vec()).unwrap()).unwrap();
            let full = q.full_kernels();
            let mut total = 0.0;
            for r in 0..3 {
                for g in 0..2 {
                    let zs = &z.row(r)[g * 4..(g + 1) * 4];
                    let mut out = vec![0.0; 4];
                    OscillatorPotential::apply_group(full.row(g), zs, &mut out);
                    for (i, o) in out.iter().enumerate() {
                        total += 2.0 * o / norms[g] * w.row(r)[g * 4 + i];
                    }
                }
            }
            total
        });
        assert!(relative_error(&analytic, &fd) < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn potential(k: Vec<f64>) -> OscillatorPotential {
            OscillatorPotential::new(2, 7, Tensor::matrix(2, 4, k).unwrap()).unwrap()
        }

        proptest! {
            #[test]
            fn operator_is_symmetric(
                k in proptest::collection::vec(-1.0f64..1.0, 8),
                a in proptest::collection::vec(-1.0f64..1.0, 16),
                b in proptest::collection::vec(-1.0f64..1.0, 16),
            ) {
                let p = potential(k);
                let wa = p.normalized_apply(&a).unwrap();
                let wb = p.normalized_apply(&b).unwrap();
                let ab: f64 = b.iter().zip(&wa).map(|(x, y)| x * y).sum();
                let ba: f64 = a.iter().zip(&wb).map(|(x, y)| x * y).sum();
                prop_assert!((ab - ba).abs() < 1e-10);
            }

            #[test]
            fn energy_is_scale_invariant_in_kernel(
                k in proptest::collection::vec(-1.0f64..1.0, 8),
                z in proptest::collection::vec(-1.0f64..1.0, 16),
                c in 0.01f64..100.0,
            ) {
                prop_assume!(k.iter().any(|v| v.abs() > 1e-3));
                let p = potential(k.clone());
                let q = potential(k.iter().map(|v| v * c).collect());
                prop_assert!((p.energy(&z).unwrap() - q.energy(&z).unwrap()).abs() < 1e-8);
            }

            #[test]
            fn gradient_is_linear(
                k in proptest::collection::vec(-1.0f64..1.0, 8),
                z in proptest::collection::vec(-1.0f64..1.0, 16),
                alpha in -10.0f64..10.0,
            ) {
                let p = potential(k);
                let scaled: Vec<f64> = z.iter().map(|v| v * alpha).collect();
                let g1 = p.grad_z(&scaled).unwrap();
                let g2 = p.grad_z(&z).unwrap();
                for (a, b) in g1.iter().zip(&g2) {
                    prop_assert!((a - alpha * b).abs() < 1e-10);
                }
            }
        }
    }
}
