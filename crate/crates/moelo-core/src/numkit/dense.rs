//! A single dense layer: `out = activation(x · W + b)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative as a function of the pre-activation value.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer with weights shaped input x output and one bias per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Gradients for one dense layer, shape-matched to its parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_weights: Matrix,
    pub d_bias: Vec<f64>,
}

impl DenseLayer {
    /// Seeded initialization: He-uniform for ReLU layers, Xavier-uniform
    /// otherwise; biases start at zero. The same seed always produces the
    /// same parameters.
    pub fn new_seeded(input: usize, output: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = match activation {
            Activation::Relu => (6.0 / input as f64).sqrt(),
            Activation::Identity => (6.0 / (input + output) as f64).sqrt(),
        };
        let mut weights = Matrix::zeros(input, output);
        for v in weights.as_mut_slice() {
            *v = rng.random_range(-limit..limit);
        }
        DenseLayer {
            weights,
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    /// Forward pass returning (pre-activation, post-activation).
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut pre = x.matmul(&self.weights)?;
        pre.add_row_bias(&self.bias)?;
        let mut post = pre.clone();
        if self.activation != Activation::Identity {
            for v in post.as_mut_slice() {
                *v = self.activation.apply(*v);
            }
        }
        Ok((pre, post))
    }

    /// Backward pass given the layer input, cached pre-activation, and the
    /// gradient w.r.t. the post-activation output. Returns parameter
    /// gradients and the gradient w.r.t. the input.
    pub fn backward(
        &self,
        input: &Matrix,
        pre: &Matrix,
        d_out: &Matrix,
    ) -> Result<(LayerGrads, Matrix)> {
        if d_out.rows() != pre.rows() || d_out.cols() != pre.cols() {
            return Err(Error::Shape(format!(
                "upstream gradient {}x{} vs layer output {}x{}",
                d_out.rows(),
                d_out.cols(),
                pre.rows(),
                pre.cols()
            )));
        }
        let mut d_pre = d_out.clone();
        if self.activation != Activation::Identity {
            for (g, &p) in d_pre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *g *= self.activation.derivative(p);
            }
        }
        let d_weights = input.transpose_matmul(&d_pre)?;
        let d_bias = d_pre.column_sums();
        let d_input = d_pre.matmul_transpose(&self.weights)?;
        Ok((
            LayerGrads { d_weights, d_bias },
            d_input,
        ))
    }

    /// Mutable flat views over [weights, bias], in that order.
    pub fn flat_params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weights.as_mut_slice(), self.bias.as_mut_slice()]
    }

    /// Flat views over [weights, bias], in that order.
    pub fn flat_params(&self) -> Vec<&[f64]> {
        vec![self.weights.as_slice(), self.bias.as_slice()]
    }
}

impl LayerGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        LayerGrads {
            d_weights: Matrix::zeros(layer.weights.rows(), layer.weights.cols()),
            d_bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn flat(&self) -> Vec<&[f64]> {
        vec![self.d_weights.as_slice(), self.d_bias.as_slice()]
    }

    pub fn add_assign(&mut self, other: &LayerGrads) {
        for (a, b) in self
            .d_weights
            .as_mut_slice()
            .iter_mut()
            .zip(other.d_weights.as_slice())
        {
            *a += b;
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            *a += b;
        }
    }
}
