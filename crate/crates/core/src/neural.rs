//! Dense ReLU networks with exact reverse-mode gradients and Adam.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::QuantizerConfig;
use crate::scalar::Scalar;

/// Fully connected network: rectifier on hidden layers, identity output.
///
/// Parameters live in one flat vector, layer by layer, each layer stored as
/// an `out × in` row-major weight block followed by `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Mlp<T: Scalar> {
    sizes: Vec<usize>,
    params: Vec<T>,
}

/// Per-layer activations recorded by [`Mlp::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace<T: Scalar> {
    /// `activations[0]` is the input, `activations[L]` the output.
    activations: Vec<Vec<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &[T] {
        self.activations.last().expect("non-empty trace")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<T: Scalar> Mlp<T> {
    /// All-zero network with the given layer widths (input first).
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self { sizes: sizes.to_vec(), params: vec![T::zero(); param_count(sizes)] })
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut net.params[offset..offset + w[0] * w[1] + w[1]] {
                *p = T::lit(rng.gen_range(-bound..bound));
            }
            offset += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    /// Builds a network from explicit `(weights[out][in], biases[out])` layers.
    pub fn from_layers(layers: Vec<(Vec<Vec<T>>, Vec<T>)>) -> Result<Self> {
        let mut sizes = Vec::with_capacity(layers.len() + 1);
        let mut params = Vec::new();
        for (i, (weights, biases)) in layers.into_iter().enumerate() {
            let fan_in = weights.first().map_or(0, Vec::len);
            if i == 0 {
                sizes.push(fan_in);
            } else if sizes[i] != fan_in {
                return Err(Error::Shape { expected: sizes[i], actual: fan_in });
            }
            if biases.len() != weights.len() || weights.iter().any(|r| r.len() != fan_in) {
                return Err(Error::Config("ragged layer".into()));
            }
            sizes.push(biases.len());
            params.extend(weights.into_iter().flatten());
            params.extend(biases);
        }
        let net = Self { sizes, params };
        Self::zeros(&net.sizes)?;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_trace(input)?.activations.pop().expect("output layer"))
    }

    pub fn forward_trace(&self, input: &[T]) -> Result<Trace<T>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), actual: input.len() });
        }
        let layers = self.sizes.len() - 1;
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(input.to_vec());
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let biases = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let x = &activations[l];
            let mut y: Vec<T> = weights
                .chunks_exact(n_in)
                .zip(biases)
                .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &xi)| acc + w * xi))
                .collect();
            if l + 1 < layers {
                for v in y.iter_mut() {
                    *v = v.max(T::zero());
                }
            }
            activations.push(y);
            offset += n_in * n_out + n_out;
        }
        Ok(Trace { activations })
    }

    /// Accumulates `d(output · out_grad)/d(params)` into `grads`.
    pub fn backward(&self, trace: &Trace<T>, out_grad: &[T], grads: &mut [T]) -> Result<()> {
        if out_grad.len() != self.output_dim() {
            return Err(Error::Shape { expected: self.output_dim(), actual: out_grad.len() });
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape { expected: self.params.len(), actual: grads.len() });
        }
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        let mut delta = out_grad.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let x = &trace.activations[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                let row = &mut grads[off + o * n_in..off + (o + 1) * n_in];
                for (g, &xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
                grads[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let weights = &self.params[off..off + n_in * n_out];
                let mut prev = vec![T::zero(); n_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d == T::zero() {
                        continue;
                    }
                    for (p, &w) in prev.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                        *p += d * w;
                    }
                }
                // ReLU gate on the hidden activation feeding this layer
                for (p, &a) in prev.iter_mut().zip(x) {
                    if a <= T::zero() {
                        *p = T::zero();
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }

    /// Parameter gradient of `output · out_grad` at one input.
    pub fn gradient(&self, input: &[T], out_grad: &[T]) -> Result<Vec<T>> {
        let trace = self.forward_trace(input)?;
        let mut grads = vec![T::zero(); self.params.len()];
        self.backward(&trace, out_grad, &mut grads)?;
        Ok(grads)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint { format_version: 1, networks: vec![self.clone()] })?)
    }
}

/// Network checkpoint file: one or more networks with a version header.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Checkpoint<T: Scalar> {
    pub format_version: u32,
    pub networks: Vec<Mlp<T>>,
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdamState<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(num_params: usize, learning_rate: T) -> Self {
        Self {
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step: 0,
            learning_rate,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update in place. Rejects non-finite gradients
    /// without touching the parameters.
    pub fn adam_step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Shape { expected: self.m.len(), actual: params.len() });
        }
        if grads.len() != self.m.len() {
            return Err(Error::Shape { expected: self.m.len(), actual: grads.len() });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient component {i} is {}", grads[i])));
        }
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let c1 = one - self.beta1.powi(t);
        let c2 = one - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Affine map of a box onto `[-1, 1]^d`, used as the network front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct InputScaler<T: Scalar> {
    center: Vec<T>,
    inv_half_range: Vec<T>,
}

impl<T: Scalar> InputScaler<T> {
    pub fn from_bounds(lower: &[T], upper: &[T]) -> Self {
        let two = T::lit(2.0);
        Self {
            center: lower.iter().zip(upper).map(|(&l, &u)| (l + u) / two).collect(),
            inv_half_range: lower.iter().zip(upper).map(|(&l, &u)| two / (u - l)).collect(),
        }
    }

    pub fn from_quantizer(q: &QuantizerConfig<T>) -> Self {
        Self::from_bounds(&q.lower, &q.upper)
    }

    pub fn identity(dims: usize) -> Self {
        Self { center: vec![T::zero(); dims], inv_half_range: vec![T::one(); dims] }
    }

    pub fn dims(&self) -> usize {
        self.center.len()
    }

    pub fn scale(&self, state: &[T]) -> Vec<T> {
        state
            .iter()
            .zip(&self.center)
            .zip(&self.inv_half_range)
            .map(|((&x, &c), &k)| (x - c) * k)
            .collect()
    }
}
