//! Parameterized layers with explicit forward and backward passes.

use super::rng::Rng;
use super::tensor::{axpy, dot, Tensor};
use crate::error::{Error, Result};

/// Affine map `W x + b` with `W: out × in`, `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(output, input),
            bias: Tensor::zeros(1, output),
        }
    }

    /// Kaiming-uniform weights over the fan-in, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let mut layer = Linear::zeros(input, output);
        kaiming_uniform(&mut layer.weight, input, rng);
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.weight.matvec(x);
        axpy(1.0, self.bias.as_slice(), &mut out);
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `∂/∂x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64], grad: &mut Linear) -> Vec<f64> {
        grad.weight.add_outer(upstream, x);
        axpy(1.0, upstream, grad.bias.as_mut_slice());
        self.weight.matvec_t(upstream)
    }

    /// Applies the map to every row of `x`.
    pub fn forward_rows(&self, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(x.rows(), self.output_dim());
        for r in 0..x.rows() {
            let y = out.row_mut(r);
            for (o, w) in self.weight.iter_rows().enumerate() {
                y[o] = dot(w, x.row(r)) + self.bias.as_slice()[o];
            }
        }
        out
    }

    /// Parameter-only backward of [`Linear::forward_rows`].
    pub fn backward_rows_params(&self, x: &Tensor, upstream: &Tensor, grad: &mut Linear) {
        for r in 0..x.rows() {
            grad.weight.add_outer(upstream.row(r), x.row(r));
            axpy(1.0, upstream.row(r), grad.bias.as_mut_slice());
        }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Kernel-3 temporal convolution over a sequence stored one frame per row.
///
/// `taps[0]` multiplies the previous frame, `taps[1]` the current frame and
/// `taps[2]` the next one; each tap is `out × in`. The sequence is
/// zero-padded by one frame at both ends, so output length equals input length.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub taps: [Tensor; 3],
    pub bias: Tensor,
}

impl Conv1d {
    pub fn zeros(input: usize, output: usize) -> Self {
        Conv1d {
            taps: std::array::from_fn(|_| Tensor::zeros(output, input)),
            bias: Tensor::zeros(1, output),
        }
    }

    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let mut layer = Conv1d::zeros(input, output);
        for tap in &mut layer.taps {
            kaiming_uniform(tap, 3 * input, rng);
        }
        layer
    }

    /// Center tap = identity, side taps and bias zero.
    pub fn identity(dim: usize) -> Self {
        let mut layer = Conv1d::zeros(dim, dim);
        layer.taps[1] = Tensor::identity(dim);
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.taps[1].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.taps[1].rows()
    }

    pub fn forward(&self, seq: &Tensor) -> Result<Tensor> {
        if seq.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "conv expects {}-dim frames, got {}",
                self.input_dim(),
                seq.cols()
            )));
        }
        Ok(self.forward_unchecked(seq))
    }

    pub(crate) fn forward_unchecked(&self, seq: &Tensor) -> Tensor {
        let len = seq.rows();
        let mut out = Tensor::zeros(len, self.output_dim());
        for t in 0..len {
            let y = out.row_mut(t);
            y.copy_from_slice(self.bias.as_slice());
            for (k, tap) in self.taps.iter().enumerate() {
                let Some(src) = (t + k).checked_sub(1).filter(|s| *s < len) else {
                    continue;
                };
                let x = seq.row(src);
                for (yo, w) in y.iter_mut().zip(tap.iter_rows()) {
                    *yo += dot(w, x);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient.
    pub fn backward(&self, seq: &Tensor, upstream: &Tensor, grad: &mut Conv1d) -> Tensor {
        let len = seq.rows();
        let mut dx = Tensor::zeros(len, self.input_dim());
        for t in 0..len {
            let g = upstream.row(t);
            axpy(1.0, g, grad.bias.as_mut_slice());
            for k in 0..3 {
                let Some(src) = (t + k).checked_sub(1).filter(|s| *s < len) else {
                    continue;
                };
                grad.taps[k].add_outer(g, seq.row(src));
                let back = self.taps[k].matvec_t(g);
                axpy(1.0, &back, dx.row_mut(src));
            }
        }
        dx
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        let [a, b, c] = &self.taps;
        [a, b, c, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        let [a, b, c] = &mut self.taps;
        [a, b, c, &mut self.bias]
    }
}

/// Kernel-3, same-length temporal convolution (see [`Conv1d`]).
pub fn temporal_conv1d(seq: &Tensor, conv: &Conv1d) -> Result<Tensor> {
    conv.forward(seq)
}

fn kaiming_uniform(weight: &mut Tensor, fan_in: usize, rng: &mut Rng) {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    for w in weight.as_mut_slice() {
        *w = rng.uniform_range(-bound, bound);
    }
}
