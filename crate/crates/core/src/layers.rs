//! Affine layer shared by the encoder, latent head and decoder.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// `y = x · W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[1, output]),
        }
    }

    /// Weights and biases uniform in `±1/sqrt(input)`.
    pub fn uniform(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self::uniform_with_bound(input, output, bound, rng)
    }

    pub fn uniform_with_bound(input: usize, output: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight = Tensor::matrix(input, output, draw(input * output)).expect("weight shape");
        let bias = Tensor::matrix(1, output, draw(output)).expect("bias shape");
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    pub fn forward(tape: &mut Tape, bound: BoundLinear, x: Var) -> Result<Var> {
        tape.affine(x, bound.weight, bound.bias)
    }

    pub(crate) fn push_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn push_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    pub(crate) fn push_vars(bound: BoundLinear, out: &mut Vec<Var>) {
        out.push(bound.weight);
        out.push(bound.bias);
    }
}
