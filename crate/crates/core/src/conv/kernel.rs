use serde::{Deserialize, Serialize};

use super::ConvError;
use crate::rng::SeededRng;

/// Pointwise nonlinearity applied after each convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    pub fn validate(self) -> Result<(), ConvError> {
        match self {
            Self::LeakyRelu(s) if !(s > 0.0 && s < 1.0) => Err(ConvError::InvalidActivation(s)),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Self::Identity => x,
        }
    }

    /// Derivative at a pre-activation value; the subgradient at 0 is 0 for
    /// ReLU and `slope` for leaky ReLU.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Self::Identity => 1.0,
        }
    }

    /// Whether the function has a kink at 0.
    pub fn is_piecewise(self) -> bool {
        !matches!(self, Self::Identity)
    }
}

/// A stack of per-offset `c_in x c_out` weight matrices plus a bias, with
/// gradient buffers of identical shape.
///
/// Weights are stored `[offset][c_in][c_out]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    offsets: usize,
    c_in: usize,
    c_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(skip)]
    pub grad_weight: Vec<f64>,
    #[serde(skip)]
    pub grad_bias: Vec<f64>,
}

impl ConvKernel {
    pub fn zeros(offsets: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            offsets,
            c_in,
            c_out,
            weight: vec![0.0; offsets * c_in * c_out],
            bias: vec![0.0; c_out],
            grad_weight: vec![0.0; offsets * c_in * c_out],
            grad_bias: vec![0.0; c_out],
        }
    }

    pub fn from_parts(
        offsets: usize,
        c_in: usize,
        c_out: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, ConvError> {
        if weight.len() != offsets * c_in * c_out || bias.len() != c_out {
            return Err(ConvError::KernelShape {
                expected: (offsets, c_in, c_out),
                weights: weight.len(),
                bias: bias.len(),
            });
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(ConvError::NonFiniteParameter);
        }
        let mut k = Self::zeros(offsets, c_in, c_out);
        k.weight = weight;
        k.bias = bias;
        Ok(k)
    }

    /// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))` with
    /// `fan = offsets * channels`; zero bias.
    pub fn glorot(offsets: usize, c_in: usize, c_out: usize, rng: &mut SeededRng) -> Self {
        let mut k = Self::zeros(offsets, c_in, c_out);
        let limit = (6.0 / ((offsets * c_in + offsets * c_out) as f64)).sqrt();
        for w in &mut k.weight {
            *w = rng.uniform_range(-limit, limit);
        }
        k
    }

    pub fn offsets(&self) -> usize {
        self.offsets
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    /// The `c_in x c_out` block of one kernel offset.
    #[inline]
    pub fn slot(&self, offset: usize) -> &[f64] {
        let n = self.c_in * self.c_out;
        &self.weight[offset * n..(offset + 1) * n]
    }

    pub fn slot_mut(&mut self, offset: usize) -> &mut [f64] {
        let n = self.c_in * self.c_out;
        &mut self.weight[offset * n..(offset + 1) * n]
    }

    /// `out += x^T W[offset]`.
    #[inline]
    pub(crate) fn accumulate(&self, offset: usize, x: &[f64], out: &mut [f64]) {
        let w = self.slot(offset);
        for (ci, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = &w[ci * self.c_out..(ci + 1) * self.c_out];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xv * wv;
            }
        }
    }

    /// `out += W[offset] g` (the transpose product used by backward).
    #[inline]
    pub(crate) fn accumulate_transpose(&self, offset: usize, g: &[f64], out: &mut [f64]) {
        let w = self.slot(offset);
        for (ci, o) in out.iter_mut().enumerate() {
            let row = &w[ci * self.c_out..(ci + 1) * self.c_out];
            let mut s = 0.0;
            for (&wv, &gv) in row.iter().zip(g) {
                s += wv * gv;
            }
            *o += s;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.iter_mut().for_each(|g| *g = 0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
        // buffers are skipped by serde; restore their shape after a load
        self.grad_weight.resize(self.weight.len(), 0.0);
        self.grad_bias.resize(self.bias.len(), 0.0);
    }

    pub(crate) fn ensure_grad_buffers(&mut self) {
        if self.grad_weight.len() != self.weight.len() || self.grad_bias.len() != self.bias.len() {
            self.zero_grad();
        }
    }

    /// Number of scalar parameters (weights then biases).
    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn param(&self, i: usize) -> f64 {
        if i < self.weight.len() {
            self.weight[i]
        } else {
            self.bias[i - self.weight.len()]
        }
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weight.len();
        if i < nw {
            &mut self.weight[i]
        } else {
            &mut self.bias[i - nw]
        }
    }

    pub fn grad(&self, i: usize) -> f64 {
        if i < self.grad_weight.len() {
            self.grad_weight[i]
        } else {
            self.grad_bias[i - self.grad_weight.len()]
        }
    }

    /// Plain gradient-descent step.
    pub fn sgd_step(&mut self, lr: f64) {
        for (w, g) in self.weight.iter_mut().zip(&self.grad_weight) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&self.grad_bias) {
            *b -= lr * g;
        }
    }

    pub(crate) fn check_input_width(&self, width: usize) -> Result<(), ConvError> {
        if width != self.c_in {
            return Err(ConvError::WidthMismatch {
                expected: self.c_in,
                found: width,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
        assert_eq!(Activation::Relu.apply(3.0), 3.0);
        assert_eq!(Activation::LeakyRelu(0.1).apply(-2.0), -0.2);
        assert_eq!(Activation::LeakyRelu(0.1).derivative(-2.0), 0.1);
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert!(Activation::LeakyRelu(1.5).validate().is_err());
        assert!(Activation::LeakyRelu(0.2).validate().is_ok());
    }

    #[test]
    fn accumulate_matches_matrix_product() {
        let mut k = ConvKernel::zeros(2, 2, 3);
        // slot 1: [[1, 2, 3], [4, 5, 6]]
        k.slot_mut(1).copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut out = [0.0; 3];
        k.accumulate(1, &[1.0, -1.0], &mut out);
        assert_eq!(out, [-3.0, -3.0, -3.0]);
        let mut back = [0.0; 2];
        k.accumulate_transpose(1, &[1.0, 0.0, 1.0], &mut back);
        assert_eq!(back, [4.0, 10.0]);
    }

    #[test]
    fn glorot_bounds() {
        let k = ConvKernel::glorot(27, 5, 8, &mut SeededRng::new(1));
        let limit = (6.0f64 / (27.0 * 13.0)).sqrt();
        assert!(k.weight.iter().all(|w| w.abs() <= limit));
        assert!(k.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn rejects_bad_parts() {
        assert!(ConvKernel::from_parts(1, 2, 2, vec![0.0; 3], vec![0.0; 2]).is_err());
        assert!(ConvKernel::from_parts(1, 1, 1, vec![f64::NAN], vec![0.0]).is_err());
    }
}
