//! Fully connected denoiser with tanh hidden layers and a sinusoidal
//! diffusion-step embedding, plus its Adam optimizer state.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};

use super::{ActionChunk, ConditionVector, PolicyError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub horizon: usize,
    pub dof: usize,
    pub condition_width: usize,
    pub hidden: Vec<usize>,
    pub embed_width: usize,
}

impl NetworkShape {
    pub fn action_width(&self) -> usize {
        self.horizon * self.dof
    }

    pub fn input_width(&self) -> usize {
        self.action_width() + self.condition_width + self.embed_width
    }

    /// `(fan_in, fan_out)` of each affine layer.
    pub fn layer_sizes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_width()];
        widths.extend(&self.hidden);
        widths.push(self.action_width());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[1, fan_out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    shape: NetworkShape,
    layers: Vec<Layer>,
}

/// Parameters of a network recorded as leaves on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(Var, Var)>,
}

impl BoundParams {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flat_map(|(w, b)| [*w, *b])
    }
}

/// Sinusoidal embedding of the diffusion step.
pub fn step_embedding(k: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    for i in 0..half {
        let freq = 1.0 / 10_000f64.powf(i as f64 / half.max(1) as f64);
        out.push((k as f64 * freq).sin());
        out.push((k as f64 * freq).cos());
    }
    if width % 2 == 1 {
        out.push(0.0);
    }
    out
}

impl PolicyNetwork {
    /// Gaussian init with variance `1 / fan_in`; biases start at zero.
    pub fn init<R: Rng>(shape: NetworkShape, rng: &mut R) -> Self {
        let layers = shape
            .layer_sizes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let std = (1.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Layer {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("layer shape"),
                    bias: Tensor::zeros(&[1, fan_out]),
                }
            })
            .collect();
        Self { shape, layers }
    }

    pub fn from_layers(shape: NetworkShape, layers: Vec<Layer>) -> Result<Self, PolicyError> {
        let sizes = shape.layer_sizes();
        if sizes.len() != layers.len() {
            return Err(PolicyError::Shape(format!("expected {} layers, got {}", sizes.len(), layers.len())));
        }
        for ((fan_in, fan_out), l) in sizes.iter().zip(&layers) {
            if l.weight.shape() != [*fan_in, *fan_out] || l.bias.shape() != [1, *fan_out] {
                return Err(PolicyError::Shape(format!(
                    "layer {:?}/{:?} does not match {fan_in}x{fan_out}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        Ok(Self { shape, layers })
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.weight.data_mut().fill(0.0);
        last.bias.data_mut().fill(0.0);
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Records all parameters on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Network input row `[flatten(a_k); cond; embed(k)]`.
    pub fn input_row(&self, noisy: &ActionChunk, cond: &ConditionVector, k: usize) -> Result<Vec<f64>, PolicyError> {
        if noisy.horizon() != self.shape.horizon || noisy.dof() != self.shape.dof {
            return Err(PolicyError::Shape(format!(
                "chunk is {}x{}, network expects {}x{}",
                noisy.horizon(),
                noisy.dof(),
                self.shape.horizon,
                self.shape.dof
            )));
        }
        let c = cond.to_vec();
        if c.len() != self.shape.condition_width {
            return Err(PolicyError::Shape(format!(
                "condition has {} values, network expects {}",
                c.len(),
                self.shape.condition_width
            )));
        }
        let mut row = Vec::with_capacity(self.shape.input_width());
        row.extend_from_slice(noisy.values());
        row.extend(c);
        row.extend(step_embedding(k, self.shape.embed_width));
        Ok(row)
    }

    /// Forward pass on the tape for an input of shape `[rows, input_width]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &BoundParams, input: Var) -> Result<Var, PolicyError> {
        let rows = tape.shape(input)[0];
        let ones = tape.constant(Tensor::filled(&[rows, 1], 1.0));
        let mut h = input;
        let last = params.vars.len() - 1;
        for (i, &(w, b)) in params.vars.iter().enumerate() {
            let xw = tape.matmul(h, w)?;
            let bias = tape.matmul(ones, b)?;
            let z = tape.add(xw, bias)?;
            h = if i == last { z } else { tape.tanh(z) };
        }
        Ok(h)
    }

    /// Tape-free forward pass; bit-identical to [`Self::forward_on_tape`].
    pub fn forward(&self, input: &[f64], rows: usize) -> Vec<f64> {
        let mut h = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (l.weight.shape()[0], l.weight.shape()[1]);
            let w = l.weight.data();
            let mut z = vec![0.0; rows * fan_out];
            for r in 0..rows {
                let zrow = &mut z[r * fan_out..(r + 1) * fan_out];
                for p in 0..fan_in {
                    let x = h[r * fan_in + p];
                    if x == 0.0 {
                        continue;
                    }
                    for (o, &wv) in zrow.iter_mut().zip(&w[p * fan_out..(p + 1) * fan_out]) {
                        *o += x * wv;
                    }
                }
                for (o, &b) in zrow.iter_mut().zip(l.bias.data()) {
                    *o += b;
                }
                if i != last {
                    for o in zrow.iter_mut() {
                        *o = o.tanh();
                    }
                }
            }
            h = z;
        }
        h
    }

    /// Predicts the clean chunk from a noisy one.
    pub fn denoise_predict(&self, noisy: &ActionChunk, cond: &ConditionVector, k: usize) -> Result<ActionChunk, PolicyError> {
        let row = self.input_row(noisy, cond, k)?;
        let out = self.forward(&row, 1);
        ActionChunk::new(self.shape.horizon, self.shape.dof, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, net: &PolicyNetwork) -> Self {
        let sizes: Vec<usize> = net
            .layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect();
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update using the gradients of the bound parameters.
    pub fn update(&mut self, net: &mut PolicyNetwork, params: &BoundParams, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - c.beta1.powi(t);
        let correction2 = 1.0 - c.beta2.powi(t);
        let tensors = net.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]);
        for (((tensor, var), m), v) in tensors
            .zip(params.vars())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let Some(g) = grads.get(var) else { continue };
            for (((p, &gv), mi), vi) in tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gv;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gv * gv;
                let m_hat = *mi / correction1;
                let v_hat = *vi / correction2;
                *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
    }
}
