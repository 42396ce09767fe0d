//! Minimal dense feedforward networks with exact reverse-mode gradients,
//! an AdamW optimizer with decoupled weight decay, global gradient clipping,
//! and Gaussian log-density helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

/// One dense layer: row-major weight matrix (out × in) and a bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Layer {
    fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.output_dim {
            let row = &self.weights[o * self.input_dim..(o + 1) * self.input_dim];
            let mut acc = self.biases[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// Feedforward network with a fixed hidden activation and a linear output
/// layer. The last layer never applies the activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Cached pre-activations and layer inputs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// inputs[l] is the input vector fed to layer l; inputs[L] is the output.
    pub inputs: Vec<Vec<f64>>,
    /// pre_activations[l] is layer l's affine output before the activation.
    pub pre_activations: Vec<Vec<f64>>,
}

/// Per-layer gradients matching a network's parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                    input_dim: l.input_dim,
                    output_dim: l.output_dim,
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += scale * y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for l in &self.layers {
            for w in &l.weights {
                acc += w * w;
            }
            for b in &l.biases {
                acc += b * b;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for w in &mut l.weights {
                *w *= s;
            }
            for b in &mut l.biases {
                *b *= s;
            }
        }
    }
}

impl DenseNet {
    /// He-style initialization scaled by 1/sqrt(fan_in).
    pub fn init(layer_sizes: &[usize], activation: Activation, rng: &mut Rng) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output sizes");
        let mut layers = Vec::new();
        for w in layer_sizes.windows(2) {
            let (input_dim, output_dim) = (w[0], w[1]);
            let scale = (2.0 / input_dim as f64).sqrt();
            let weights = (0..input_dim * output_dim)
                .map(|_| rng.normal() * scale)
                .collect();
            let biases = vec![0.0; output_dim];
            layers.push(Layer { weights, biases, input_dim, output_dim });
        }
        DenseNet { layer_sizes: layer_sizes.to_vec(), layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(TapError::Shape(format!(
                "input length {} does not match layer size {}",
                x.len(),
                self.input_dim()
            )));
        }
        let num_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(num_layers + 1);
        let mut pre_activations = Vec::with_capacity(num_layers);
        inputs.push(x.to_vec());
        let mut buf = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            layer.forward_into(inputs.last().unwrap(), &mut buf);
            pre_activations.push(buf.clone());
            let is_last = li + 1 == num_layers;
            let activated: Vec<f64> = if is_last {
                buf.clone()
            } else {
                buf.iter().map(|&z| self.activation.apply(z)).collect()
            };
            inputs.push(activated);
        }
        let out = inputs.last().unwrap().clone();
        Ok((out, ForwardCache { inputs, pre_activations }))
    }

    /// Exact reverse-mode gradients of a scalar loss whose gradient at the
    /// network output is `loss_grad_at_output`. Also returns the gradient
    /// with respect to the input vector.
    pub fn backward(
        &self,
        loss_grad_at_output: &[f64],
        cache: &ForwardCache,
    ) -> Result<(Gradients, Vec<f64>)> {
        if loss_grad_at_output.len() != self.output_dim() {
            return Err(TapError::Shape("output gradient length mismatch".into()));
        }
        if cache.inputs.len() != self.layers.len() + 1 {
            return Err(TapError::Shape("stale forward cache".into()));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = loss_grad_at_output.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let is_last = li + 1 == self.layers.len();
            if !is_last {
                for (d, z) in delta.iter_mut().zip(&cache.pre_activations[li]) {
                    *d *= self.activation.derivative(*z);
                }
            }
            let input = &cache.inputs[li];
            let g = &mut grads.layers[li];
            for o in 0..layer.output_dim {
                g.biases[o] += delta[o];
                let row = &mut g.weights[o * layer.input_dim..(o + 1) * layer.input_dim];
                for (gw, x) in row.iter_mut().zip(input) {
                    *gw += delta[o] * x;
                }
            }
            let mut next_delta = vec![0.0; layer.input_dim];
            for o in 0..layer.output_dim {
                let row = &layer.weights[o * layer.input_dim..(o + 1) * layer.input_dim];
                for (nd, w) in next_delta.iter_mut().zip(row) {
                    *nd += delta[o] * w;
                }
            }
            delta = next_delta;
        }
        Ok((grads, delta))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "version": 1,
            "layer_sizes": self.layer_sizes,
            "activation": self.activation,
            "layers": self.layers,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let version = value["version"].as_u64().unwrap_or(0);
        if version != 1 {
            return Err(TapError::Config(format!("unsupported checkpoint version {version}")));
        }
        let layer_sizes: Vec<usize> = serde_json::from_value(value["layer_sizes"].clone())?;
        let activation: Activation = serde_json::from_value(value["activation"].clone())?;
        let layers: Vec<Layer> = serde_json::from_value(value["layers"].clone())?;
        for (w, l) in layer_sizes.windows(2).zip(&layers) {
            if l.input_dim != w[0] || l.output_dim != w[1] || l.weights.len() != w[0] * w[1] {
                return Err(TapError::Shape("checkpoint layer shape mismatch".into()));
            }
        }
        Ok(DenseNet { layer_sizes, layers, activation })
    }
}

/// AdamW optimizer state with decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Layer>,
    v: Vec<Layer>,
}

impl AdamW {
    pub fn new(net: &DenseNet, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros = Gradients::zeros_like(net).layers;
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One AdamW step: decoupled decay, then bias-corrected moment update.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let g = &grads.layers[li];
            let m = &mut self.m[li];
            let v = &mut self.v[li];
            for i in 0..layer.weights.len() {
                layer.weights[i] -= self.learning_rate * self.weight_decay * layer.weights[i];
                m.weights[i] = self.beta1 * m.weights[i] + (1.0 - self.beta1) * g.weights[i];
                v.weights[i] = self.beta2 * v.weights[i] + (1.0 - self.beta2) * g.weights[i] * g.weights[i];
                let m_hat = m.weights[i] / bc1;
                let v_hat = v.weights[i] / bc2;
                layer.weights[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
            for i in 0..layer.biases.len() {
                m.biases[i] = self.beta1 * m.biases[i] + (1.0 - self.beta1) * g.biases[i];
                v.biases[i] = self.beta2 * v.biases[i] + (1.0 - self.beta2) * g.biases[i] * g.biases[i];
                let m_hat = m.biases[i] / bc1;
                let v_hat = v.biases[i] / bc2;
                layer.biases[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales gradients in place when their global L2 norm exceeds `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
}

/// Log-density of N(mean, std²) at x.
pub fn gaussian_logpdf(x: f64, mean: f64, std: f64) -> Result<f64> {
    if std <= 0.0 {
        return Err(TapError::InvalidArgument(format!("std must be positive, got {std}")));
    }
    let z = (x - mean) / std;
    Ok(-0.5 * (2.0 * std::f64::consts::PI).ln() - std.ln() - 0.5 * z * z)
}

/// Maximum relative error between backprop gradients and central finite
/// differences (h = 1e-5) on a random net with a squared loss. Relu
/// pre-activations are nudged away from 0 first, where finite differences
/// are invalid.
pub fn gradient_check(seed: u64, sizes: &[usize], activation: Activation) -> f64 {
    let mut rng = Rng::seed(seed);
    let mut net = DenseNet::init(sizes, activation, &mut rng);
    let x: Vec<f64> = (0..sizes[0]).map(|_| rng.normal()).collect();
    let target: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.normal()).collect();

    if activation == Activation::Relu {
        loop {
            let (_, cache) = net.forward_cached(&x).unwrap();
            let min_abs = cache
                .pre_activations
                .iter()
                .take(net.layers.len().saturating_sub(1))
                .flat_map(|v| v.iter())
                .fold(f64::INFINITY, |m, z| m.min(z.abs()));
            if min_abs > 1e-3 {
                break;
            }
            for l in &mut net.layers {
                for b in &mut l.biases {
                    *b += 2e-3;
                }
            }
        }
    }

    let loss = |net: &DenseNet| -> f64 {
        let y = net.forward(&x).unwrap();
        0.5 * y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };
    let (y, cache) = net.forward_cached(&x).unwrap();
    let residual: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
    let (grads, _) = net.backward(&residual, &cache).unwrap();

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for li in 0..net.layers.len() {
        for wi in 0..net.layers[li].weights.len() {
            let orig = net.layers[li].weights[wi];
            net.layers[li].weights[wi] = orig + h;
            let lp = loss(&net);
            net.layers[li].weights[wi] = orig - h;
            let lm = loss(&net);
            net.layers[li].weights[wi] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.layers[li].weights[wi];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        for bi in 0..net.layers[li].biases.len() {
            let orig = net.layers[li].biases[bi];
            net.layers[li].biases[bi] = orig + h;
            let lp = loss(&net);
            net.layers[li].biases[bi] = orig - h;
            let lm = loss(&net);
            net.layers[li].biases[bi] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.layers[li].biases[bi];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
