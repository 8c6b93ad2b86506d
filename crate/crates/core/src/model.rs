//! Small fully connected embedding network and its optimizer.
//!
//! Hidden layers apply a rectifier; the output layer is affine. `forward`
//! records a tape of layer inputs and pre-activations from which `backward`
//! computes exact parameter gradients.

use rand::Rng;

use crate::error::{NptError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `out x in`
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(NptError::DimensionMismatch {
                expected: weight.rows(),
                got: bias.len(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    /// `x W^T + b` for every row of `x`.
    fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(x.rows(), self.outputs());
        for (i, xi) in x.iter_rows().enumerate() {
            let row = out.row_mut(i);
            for (o, (w, &b)) in row.iter_mut().zip(self.weight.iter_rows().zip(&self.bias)) {
                *o = crate::scalar::dot(w, xi) + b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderModel<T> {
    layers: Vec<Dense<T>>,
}

/// Activations cached by [`EmbedderModel::forward`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    /// Input to each layer.
    inputs: Vec<Matrix<T>>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix<T>>,
}

/// Gradients for each layer, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> ModelGrads<T> {
    /// Flat views in the same order as [`EmbedderModel::params_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }
}

impl<T: Scalar> EmbedderModel<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(NptError::InvalidArgument(format!(
                "layer dims must list at least two positive sizes, got {layer_dims:?}"
            )));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| T::lit(rng.random_range(-limit..limit)))
                    .collect();
                Dense::new(
                    Matrix::from_vec(fan_out, fan_in, data)?,
                    vec![T::zero(); fan_out],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NptError::InvalidArgument("model needs a layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(NptError::DimensionMismatch {
                    expected: pair[0].outputs(),
                    got: pair[1].inputs(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Dense::outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Runs the network on each row of `inputs`.
    pub fn forward(&self, inputs: &Matrix<T>) -> Result<(Matrix<T>, Tape<T>)> {
        if inputs.cols() != self.input_dim() {
            return Err(NptError::DimensionMismatch {
                expected: self.input_dim(),
                got: inputs.cols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut x = inputs.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = layer.apply(&x);
            let next = if l == last {
                pre.clone()
            } else {
                let mut a = pre.clone();
                a.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = v.max(T::zero()));
                a
            };
            tape.inputs.push(x);
            tape.pre.push(pre);
            x = next;
        }
        Ok((x, tape))
    }

    /// Forward pass without keeping the tape.
    pub fn embed(&self, inputs: &Matrix<T>) -> Result<Matrix<T>> {
        self.forward(inputs).map(|(out, _)| out)
    }

    /// Backpropagates `grad_out` (same shape as the forward output).
    pub fn backward(&self, tape: &Tape<T>, grad_out: &Matrix<T>) -> Result<ModelGrads<T>> {
        let n = self.layers.len();
        if tape.inputs.len() != n || tape.pre.len() != n {
            return Err(NptError::TapeMismatch);
        }
        for (layer, (x, pre)) in self.layers.iter().zip(tape.inputs.iter().zip(&tape.pre)) {
            if x.cols() != layer.inputs() || pre.cols() != layer.outputs() || x.rows() != pre.rows()
            {
                return Err(NptError::TapeMismatch);
            }
        }
        if grad_out.rows() != tape.pre[n - 1].rows() || grad_out.cols() != self.output_dim() {
            return Err(NptError::TapeMismatch);
        }

        let mut grads = Vec::with_capacity(n);
        let mut delta = grad_out.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let x = &tape.inputs[l];
            let mut gw = Matrix::zeros(layer.outputs(), layer.inputs());
            let mut gb = vec![T::zero(); layer.outputs()];
            for (d_row, x_row) in delta.iter_rows().zip(x.iter_rows()) {
                for (o, &d) in d_row.iter().enumerate() {
                    if d == T::zero() {
                        continue;
                    }
                    gb[o] = gb[o] + d;
                    crate::scalar::axpy(d, x_row, gw.row_mut(o));
                }
            }
            if l > 0 {
                let mut below = Matrix::zeros(delta.rows(), layer.inputs());
                for (i, d_row) in delta.iter_rows().enumerate() {
                    let out = below.row_mut(i);
                    for (&d, w) in d_row.iter().zip(layer.weight.iter_rows()) {
                        crate::scalar::axpy(d, w, out);
                    }
                }
                // rectifier of the layer below
                let pre = &tape.pre[l - 1];
                for (g, &p) in below.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if p <= T::zero() {
                        *g = T::zero();
                    }
                }
                delta = below;
            }
            grads.push(Dense::new(gw, gb)?);
        }
        grads.reverse();
        Ok(ModelGrads { layers: grads })
    }

    /// Mutable flat parameter views: weight then bias for each layer.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }
}

/// SGD with momentum, L2 weight decay and a step learning-rate schedule.
///
/// `v <- momentum v + grad + weight_decay param; param <- param - lr(epoch) v`
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    pub base_lr: T,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: T,
    velocities: Vec<Vec<T>>,
    decay_exempt: Vec<usize>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(
        base_lr: T,
        momentum: T,
        weight_decay: T,
        decay_epochs: Vec<usize>,
        decay_factor: T,
    ) -> Result<Self> {
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(NptError::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= T::zero()) {
            return Err(NptError::InvalidArgument(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        if !(decay_factor > T::zero() && decay_factor <= T::one()) {
            return Err(NptError::InvalidArgument(format!(
                "decay factor must lie in (0, 1], got {decay_factor}"
            )));
        }
        if !(base_lr > T::zero()) {
            return Err(NptError::InvalidArgument(format!(
                "learning rate must be positive, got {base_lr}"
            )));
        }
        Ok(Self {
            momentum,
            weight_decay,
            base_lr,
            decay_epochs,
            decay_factor,
            velocities: Vec::new(),
            decay_exempt: Vec::new(),
        })
    }

    /// Excludes parameter slot `slot` from weight decay.
    pub fn exempt_from_decay(&mut self, slot: usize) {
        if !self.decay_exempt.contains(&slot) {
            self.decay_exempt.push(slot);
        }
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr(&self, epoch: usize) -> T {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base_lr * self.decay_factor.powi(decays as i32)
    }

    pub fn velocities(&self) -> &[Vec<T>] {
        &self.velocities
    }

    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], epoch: usize) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NptError::ShapeMismatch);
        }
        if params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(NptError::ShapeMismatch);
        }
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        } else if self.velocities.len() != params.len()
            || self
                .velocities
                .iter()
                .zip(params.iter())
                .any(|(v, p)| v.len() != p.len())
        {
            return Err(NptError::ShapeMismatch);
        }
        let lr = self.lr(epoch);
        for (slot, ((p, g), v)) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocities)
            .enumerate()
        {
            let wd = if self.decay_exempt.contains(&slot) {
                T::zero()
            } else {
                self.weight_decay
            };
            for ((pi, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + wd * *pi;
                *pi = *pi - lr * *vi;
            }
        }
        Ok(())
    }
}
