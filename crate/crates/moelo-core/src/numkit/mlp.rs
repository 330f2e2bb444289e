//! Small feed-forward stacks with inverted dropout between hidden layers.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::dense::{DenseLayer, LayerGrads};
use crate::numkit::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    /// Probability of dropping a hidden unit during training. Zero disables
    /// dropout entirely.
    pub dropout_rate: f64,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Input actually fed to each layer (post-dropout for layers > 0).
    pub layer_inputs: Vec<Matrix>,
    pub pre_acts: Vec<Matrix>,
    /// Inverted-dropout mask applied after each hidden layer; `None` in eval
    /// mode or when the rate is zero. Indexed by hidden layer.
    pub dropout_masks: Vec<Option<Matrix>>,
    pub output: Matrix,
}

/// Per-layer parameter gradients for one stack.
#[derive(Debug, Clone)]
pub struct GradSet {
    pub layers: Vec<LayerGrads>,
}

impl GradSet {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        GradSet {
            layers: mlp.layers.iter().map(LayerGrads::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradSet) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    /// Flat gradient views in [w0, b0, w1, b1, ...] order, matching
    /// `Mlp::flat_params_mut`.
    pub fn flat(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|g| g.flat()).collect()
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>, dropout_rate: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("mlp needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {dropout_rate}"
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Mlp {
            layers,
            dropout_rate,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Forward pass. Dropout fires only when `training` is true and the rate
    /// is nonzero; the mask stream is fully determined by `dropout_seed`.
    pub fn forward(&self, x: &Matrix, training: bool, dropout_seed: u64) -> Result<Matrix> {
        Ok(self.forward_tape(x, training, dropout_seed)?.output)
    }

    pub fn forward_tape(&self, x: &Matrix, training: bool, dropout_seed: u64) -> Result<MlpTape> {
        let use_dropout = training && self.dropout_rate > 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let keep = 1.0 - self.dropout_rate;

        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut dropout_masks = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut current = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (pre, mut post) = layer.forward(&current)?;
            layer_inputs.push(current);
            pre_acts.push(pre);
            if i < last {
                if use_dropout {
                    let mut mask = Matrix::zeros(post.rows(), post.cols());
                    for m in mask.as_mut_slice() {
                        *m = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                    }
                    for (v, &m) in post.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *v *= m;
                    }
                    dropout_masks.push(Some(mask));
                } else {
                    dropout_masks.push(None);
                }
            }
            current = post;
        }
        Ok(MlpTape {
            layer_inputs,
            pre_acts,
            dropout_masks,
            output: current,
        })
    }

    /// Backward pass through the recorded tape. Returns per-layer parameter
    /// gradients plus the gradient w.r.t. the stack input.
    pub fn backward(&self, tape: &MlpTape, d_output: &Matrix) -> Result<(GradSet, Matrix)> {
        if tape.layer_inputs.len() != self.layers.len() {
            return Err(Error::State(
                "tape does not match this stack's layer count".into(),
            ));
        }
        let mut grads: Vec<Option<LayerGrads>> = (0..self.layers.len()).map(|_| None).collect();
        let mut d_post = d_output.clone();
        for i in (0..self.layers.len()).rev() {
            // Undo the dropout that sat between layer i and layer i+1.
            if i < self.layers.len() - 1 {
                if let Some(mask) = &tape.dropout_masks[i] {
                    for (g, &m) in d_post.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *g *= m;
                    }
                }
            }
            let (layer_grads, d_input) =
                self.layers[i].backward(&tape.layer_inputs[i], &tape.pre_acts[i], &d_post)?;
            grads[i] = Some(layer_grads);
            d_post = d_input;
        }
        let grads = GradSet {
            layers: grads.into_iter().map(Option::unwrap).collect(),
        };
        Ok((grads, d_post))
    }

    /// Mutable flat parameter views in [w0, b0, w1, b1, ...] order.
    pub fn flat_params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.flat_params_mut())
            .collect()
    }

    pub fn flat_params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.flat_params()).collect()
    }
}
