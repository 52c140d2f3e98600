//! Fully connected network with flat parameter storage.
//!
//! Parameters of all layers live in one `Vec<f64>`: for each layer the
//! `out x in` row-major weight matrix followed by the bias. Gradients use the
//! same layout, which keeps the optimizer and finite-difference checks
//! trivial.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, needed for backprop.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// `inputs[l]` is the input of layer `l`; the last entry is the output.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {layer_sizes:?}")));
        }
        let n = param_count(&layer_sizes);
        Ok(Self { layer_sizes, activation, params: vec![0.0; n] })
    }

    /// Weights uniform in `±sqrt(6 / fan_in)`, biases zero.
    pub fn init<R: Rng>(layer_sizes: Vec<usize>, activation: Activation, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(layer_sizes, activation)?;
        let mut off = 0;
        for l in 0..mlp.layer_sizes.len() - 1 {
            let (fan_in, fan_out) = (mlp.layer_sizes[l], mlp.layer_sizes[l + 1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            for w in &mut mlp.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-limit..limit);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(mlp)
    }

    pub fn from_params(layer_sizes: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        let mut mlp = Self::zeros(layer_sizes, activation)?;
        if params.len() != mlp.params.len() {
            return Err(Error::DimensionMismatch { expected: mlp.params.len(), actual: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        mlp.params = params;
        Ok(mlp)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `(weight offset, bias offset)` of layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self.layer_sizes[..=l].windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        (off, off + self.layer_sizes[l] * self.layer_sizes[l + 1])
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), actual: x.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut off = 0;
        let last = self.layer_sizes.len() - 2;
        for l in 0..=last {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut next: Vec<f64> = w.chunks_exact(n_in).zip(b).map(|(row, bi)| dot(row, &cur) + bi).collect();
            if l < last {
                next.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            cur = next;
            off += n_in * n_out + n_out;
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let n_layers = self.layer_sizes.len() - 1;
        let mut trace = ForwardTrace {
            activations: Vec::with_capacity(n_layers + 1),
            pre: Vec::with_capacity(n_layers),
        };
        trace.activations.push(x.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let input = &trace.activations[l];
            let z: Vec<f64> = w.chunks_exact(n_in).zip(b).map(|(row, bi)| dot(row, input) + bi).collect();
            let a = if l + 1 < n_layers { z.iter().map(|&v| self.activation.apply(v)).collect() } else { z.clone() };
            trace.pre.push(z);
            trace.activations.push(a);
            off += n_in * n_out + n_out;
        }
        Ok(trace)
    }

    /// Accumulate `dL/dparams` into `grads` given `dL/doutput`.
    pub fn backward(&self, trace: &ForwardTrace, d_out: &[f64], grads: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.params.len());
        let n_layers = self.layer_sizes.len() - 1;
        let mut delta = d_out.to_vec();
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.layer_sizes[l] * self.layer_sizes[l + 1] + self.layer_sizes[l + 1];
        }
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let off = offsets[l];
            let input = &trace.activations[l];
            {
                let (gw, gb) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wv;
                }
            }
            let z = &trace.pre[l - 1];
            let a = &trace.activations[l];
            for ((p, &zv), &av) in prev.iter_mut().zip(z).zip(a) {
                *p *= self.activation.derivative(zv, av);
            }
            delta = prev;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: vec![0.0; num_params] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v - lr * (g + self.weight_decay * *p);
            *p += *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::zeros(vec![3, 5, 2], Activation::Relu).unwrap();
        assert_eq!(mlp.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(mlp.num_params(), 3 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn rejects_wrong_input_and_sizes() {
        let mlp = Mlp::zeros(vec![3, 2], Activation::Relu).unwrap();
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::DimensionMismatch { expected: 3, actual: 1 })));
        assert!(Mlp::zeros(vec![3], Activation::Relu).is_err());
        assert!(Mlp::zeros(vec![3, 0, 2], Activation::Relu).is_err());
        assert!(Mlp::from_params(vec![2, 1], Activation::Relu, vec![0.0; 2]).is_err());
    }

    #[test]
    fn trace_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::init(vec![4, 6, 5, 3], Activation::Relu, &mut rng).unwrap();
        let x = [0.3, -0.2, 0.9, 0.1];
        assert_eq!(mlp.forward(&x).unwrap(), mlp.forward_trace(&x).unwrap().output());
    }

    #[test]
    fn doubling_last_layer_doubles_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::init(vec![4, 6, 3], Activation::Tanh, &mut rng).unwrap();
        let x = [0.5, -0.4, 0.2, 0.7];
        let before = mlp.forward(&x).unwrap();
        let (w_off, _) = mlp.layer_offsets(1);
        let end = mlp.num_params();
        mlp.params_mut()[w_off..end].iter_mut().for_each(|p| *p *= 2.0);
        let after = mlp.forward(&x).unwrap();
        for (a, b) in after.iter().zip(&before) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut params = vec![3.0, -2.0];
        let mut opt = Sgd::new(2, 0.9, 0.0);
        for _ in 0..200 {
            let grads: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
            opt.step(&mut params, &grads, 0.05);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-3));
    }
}
