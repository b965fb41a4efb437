//! Minimal fully connected networks with exact backpropagation.
//!
//! Parameters of a layer are laid out as the row-major weight matrix
//! (`outputs x inputs`) followed by the bias. Multi-layer parameter vectors
//! concatenate layers in order. Every gradient buffer uses the same layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform fan-in initialisation in `[-1/sqrt(in), 1/sqrt(in)]`.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *w = rng.random_range(-bound..=bound);
        }
        layer
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs);
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs.max(1)).zip(&self.bias))
        {
            *o = dot(row, x) + b;
        }
        if self.inputs == 0 {
            out.copy_from_slice(&self.bias);
        }
    }

    /// Accumulate parameter gradients for upstream `grad_out` into `grad`
    /// (length `num_params`), and optionally write the input gradient.
    pub fn backward(
        &self,
        x: &[f64],
        grad_out: &[f64],
        grad: &mut [f64],
        grad_in: Option<&mut [f64]>,
    ) {
        let (gw, gb) = grad.split_at_mut(self.weights.len());
        for (o, &go) in grad_out.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let row = &mut gw[o * self.inputs..(o + 1) * self.inputs];
            for (g, &xi) in row.iter_mut().zip(x) {
                *g += go * xi;
            }
            gb[o] += go;
        }
        if let Some(gi) = grad_in {
            gi.iter_mut().for_each(|g| *g = 0.0);
            for (o, &go) in grad_out.iter().enumerate() {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                for (g, &w) in gi.iter_mut().zip(row) {
                    *g += go * w;
                }
            }
        }
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weights);
        out.extend_from_slice(&self.bias);
    }

    /// Reads `num_params` values from the front of `src`, returning the rest.
    pub fn read_params<'a>(&mut self, src: &'a [f64]) -> &'a [f64] {
        let (w, rest) = src.split_at(self.weights.len());
        let (b, rest) = rest.split_at(self.bias.len());
        self.weights.copy_from_slice(w);
        self.bias.copy_from_slice(b);
        rest
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Feed-forward stack; `activation` follows every layer, except the last one
/// when `linear_output` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
    pub linear_output: bool,
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    /// `inputs[l]` is the input of layer `l`; the final entry is the network output.
    pub values: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        linear_output: bool,
        rng: &mut R,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            activation,
            linear_output,
        }
    }

    pub fn identity() -> Self {
        Self {
            layers: Vec::new(),
            activation: Activation::Identity,
            linear_output: true,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    fn layer_activation(&self, l: usize) -> Activation {
        if self.linear_output && l + 1 == self.layers.len() {
            Activation::Identity
        } else {
            self.activation
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.outputs];
            layer.forward(&cur, &mut next);
            let act = self.layer_activation(l);
            next.iter_mut().for_each(|v| *v = act.apply(*v));
            cur = next;
        }
        cur
    }

    pub fn forward_cached(&self, x: &[f64]) -> MlpCache {
        let mut cache = MlpCache {
            values: Vec::with_capacity(self.layers.len() + 1),
            pre: Vec::with_capacity(self.layers.len()),
        };
        cache.values.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut pre = vec![0.0; layer.outputs];
            layer.forward(cache.values.last().unwrap(), &mut pre);
            let act = self.layer_activation(l);
            let post = pre.iter().map(|&v| act.apply(v)).collect();
            cache.pre.push(pre);
            cache.values.push(post);
        }
        cache
    }

    /// Backpropagate `grad_out` (gradient w.r.t. the network output) through a
    /// cached pass, accumulating into `grad` and returning the input gradient.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut upstream = grad_out.to_vec();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.num_params();
        }
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let act = self.layer_activation(l);
            let pre = &cache.pre[l];
            let post = &cache.values[l + 1];
            for ((u, &x), &y) in upstream.iter_mut().zip(pre).zip(post) {
                *u *= act.derivative(x, y);
            }
            let mut grad_in = vec![0.0; layer.inputs];
            let span = &mut grad[offsets[l]..offsets[l] + layer.num_params()];
            layer.backward(&cache.values[l], &upstream, span, Some(&mut grad_in));
            upstream = grad_in;
        }
        upstream
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            layer.write_params(out);
        }
    }

    pub fn read_params<'a>(&mut self, mut src: &'a [f64]) -> &'a [f64] {
        for layer in &mut self.layers {
            src = layer.read_params(src);
        }
        src
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_params(&mut out);
        out
    }
}

/// Adaptive-moment optimiser state over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        if self.m.len() != params.len() {
            *self = Adam::new(params.len());
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn loss(net: &Mlp, x: &[f64], target: &[f64]) -> f64 {
        net.forward(x)
            .iter()
            .zip(target)
            .map(|(a, b)| 0.5 * (a - b) * (a - b))
            .sum()
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = rng_from(5);
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Identity] {
            let mut net = Mlp::new(&[3, 5, 4, 2], act, true, &mut rng);
            let x = [0.3, -0.7, 1.1];
            let target = [0.2, -0.4];
            let cache = net.forward_cached(&x);
            let err: Vec<f64> = cache.output().iter().zip(&target).map(|(a, b)| a - b).collect();
            let mut grad = vec![0.0; net.num_params()];
            let grad_in = net.backward(&cache, &err, &mut grad);
            let base = net.params();
            let h = 1e-6;
            for k in 0..base.len() {
                let mut p = base.clone();
                p[k] += h;
                net.read_params(&p);
                let up = loss(&net, &x, &target);
                p[k] -= 2.0 * h;
                net.read_params(&p);
                let down = loss(&net, &x, &target);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - grad[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "{act:?} param {k}");
            }
            net.read_params(&base);
            for j in 0..3 {
                let mut xp = x;
                xp[j] += h;
                let up = loss(&net, &xp, &target);
                xp[j] -= 2.0 * h;
                let down = loss(&net, &xp, &target);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - grad_in[j]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_fresh_params() {
        let mut adam = Adam::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0, 0.0, 0.0], 1e-3);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn params_round_trip() {
        let mut rng = rng_from(1);
        let net = Mlp::new(&[4, 3, 2], Activation::Relu, true, &mut rng);
        let mut other = Mlp::new(&[4, 3, 2], Activation::Relu, true, &mut rng);
        assert_ne!(net, other);
        let flat = net.params();
        let rest = other.read_params(&flat);
        assert!(rest.is_empty());
        assert_eq!(net, other);
    }
}
