//! Fully connected layers without activation.

use rand::Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::error::{Error, Result};

/// `y = W x (+ b)`. Weights are `[out, in]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    weights: Tensor,
    bias: Tensor,
    has_bias: bool,
}

impl LinearLayer {
    pub fn new(weights: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "linear weights must be 2-D, got {:?}",
                weights.shape()
            )));
        }
        let out = weights.shape()[0];
        match bias {
            Some(b) => {
                if b.shape() != [out] {
                    return Err(Error::Shape(format!(
                        "bias shape {:?} does not match {out} output rows",
                        b.shape()
                    )));
                }
                Ok(Self {
                    weights,
                    bias: b,
                    has_bias: true,
                })
            }
            None => Ok(Self {
                weights,
                bias: Tensor::zeros(vec![out]),
                has_bias: false,
            }),
        }
    }

    pub fn zeros(out: usize, input: usize, has_bias: bool) -> Self {
        Self {
            weights: Tensor::zeros(vec![out, input]),
            bias: Tensor::zeros(vec![out]),
            has_bias,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut w = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = 1.0;
        }
        Self {
            weights: w,
            bias: Tensor::zeros(vec![n]),
            has_bias: false,
        }
    }

    /// Gaussian init scaled by `1/sqrt(in)`, bias zero.
    pub fn init<R: Rng>(out: usize, input: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        let data: Vec<f64> = (0..out * input)
            .map(|_| {
                let g: f64 = rng.sample(StandardNormal);
                g * scale
            })
            .collect();
        Self {
            weights: Tensor::new(vec![out, input], data).expect("sized above"),
            bias: Tensor::zeros(vec![out]),
            has_bias: true,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn has_bias(&self) -> bool {
        self.has_bias
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (out, input) = (self.out_dim(), self.in_dim());
        if x.len() != input {
            return Err(Error::Shape(format!(
                "linear expects {input} inputs, got {}",
                x.len()
            )));
        }
        let w = self.weights.data();
        let b = self.bias.data();
        let mut y = Vec::with_capacity(out);
        for r in 0..out {
            let row = &w[r * input..(r + 1) * input];
            let mut acc = if self.has_bias { b[r] } else { 0.0 };
            acc += row.iter().zip(x).map(|(&wi, &xi)| wi * xi).sum::<f64>();
            y.push(acc);
        }
        Ok(y)
    }

    /// Accumulates `dW += dy ⊗ x`, `db += dy`, returns `dx = Wᵀ dy`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut LinearGrads) -> Result<Vec<f64>> {
        let (out, input) = (self.out_dim(), self.in_dim());
        if x.len() != input || dy.len() != out {
            return Err(Error::Shape(format!(
                "linear backward got x={} dy={}, layer is {out}x{input}",
                x.len(),
                dy.len()
            )));
        }
        let gw = grads.weights.data_mut();
        for r in 0..out {
            let row = &mut gw[r * input..(r + 1) * input];
            let d = dy[r];
            for (g, &xi) in row.iter_mut().zip(x) {
                *g += d * xi;
            }
        }
        if self.has_bias {
            for (g, &d) in grads.bias.data_mut().iter_mut().zip(dy) {
                *g += d;
            }
        }
        let w = self.weights.data();
        let mut dx = vec![0.0; input];
        for r in 0..out {
            let row = &w[r * input..(r + 1) * input];
            let d = dy[r];
            for (dxi, &wi) in dx.iter_mut().zip(row) {
                *dxi += wi * d;
            }
        }
        Ok(dx)
    }

    pub fn zero_grads(&self) -> LinearGrads {
        LinearGrads {
            weights: Tensor::zeros(self.weights.shape().to_vec()),
            bias: Tensor::zeros(self.bias.shape().to_vec()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}
