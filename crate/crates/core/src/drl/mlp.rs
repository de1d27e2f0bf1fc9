use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Fully connected network with ReLU hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Gradients with the same shapes as [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights *= s;
            l.bias *= s;
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }
}

struct Trace {
    /// Input to each layer (the network input first).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// He-initialized network with zero biases. `sizes` lists every layer
    /// width from the input to the output.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (6.0 / fan_in as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_simple_fn((fan_out, fan_in), || rng.gen_range(-scale..scale)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.nrows())
    }

    fn trace(&self, x: ArrayView2<f64>) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = h.dot(&l.weights.t()) + &l.bias;
            inputs.push(h);
            h = if i < last { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
        }
        Trace { inputs, pre }
    }

    /// Outputs for a `batch × input` matrix.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("mlp input", self.input_dim(), x.ncols()));
        }
        let mut t = self.trace(x);
        Ok(t.pre.pop().expect("network has layers"))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view =
            ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::dim("mlp input", self.input_dim(), x.len()))?;
        Ok(self.forward_batch(view)?.row(0).to_vec())
    }

    /// Mean over the batch of `(Q(x_i)[a_i] − y_i)²` and its gradient.
    pub fn td_loss_gradient(&self, x: ArrayView2<f64>, actions: &[usize], targets: &[f64]) -> Result<(f64, Gradients)> {
        let n = x.nrows();
        if n == 0 || actions.len() != n || targets.len() != n {
            return Err(Error::dim("td batch", n, actions.len().min(targets.len())));
        }
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("mlp input", self.input_dim(), x.ncols()));
        }
        let t = self.trace(x);
        let out = t.pre.last().expect("network has layers");
        let mut delta = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        for (i, (&a, &y)) in actions.iter().zip(targets).enumerate() {
            if a >= out.ncols() {
                return Err(Error::IndexOutOfRange {
                    index: a,
                    size: out.ncols(),
                });
            }
            let e = out[(i, a)] - y;
            loss += e * e;
            delta[(i, a)] = 2.0 * e / n as f64;
        }
        loss /= n as f64;

        let mut grads = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let gw = delta.t().dot(&t.inputs[k]);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Layer { weights: gw, bias: gb });
            if k > 0 {
                let mut back = delta.dot(&self.layers[k].weights);
                back.zip_mut_with(&t.pre[k - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }

    /// Gradient descent step with the gradient norm clipped to `max_norm`.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64, max_norm: f64) {
        let norm = grads.norm();
        let scale = if norm > max_norm && norm > 0.0 {
            max_norm / norm
        } else {
            1.0
        };
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weights.scaled_add(-learning_rate * scale, &g.weights);
            l.bias.scaled_add(-learning_rate * scale, &g.bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}
