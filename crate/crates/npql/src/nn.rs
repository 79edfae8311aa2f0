//! Minimal differentiable core: fully connected networks with hand-rolled
//! reverse-mode gradients and an Adam optimizer.
//!
//! Hidden layers use relu, the output layer is linear. Output heads apply
//! their own transforms (softplus, softmax, ...) outside of this module.
//! Everything is `f64`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NpqlError, Result};

/// Fully connected network. Weights are row-major `[out_dim, in_dim]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Per-layer parameter gradients, shapes mirror [`Mlp`] exactly.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Cached activations from [`Mlp::forward_cached`]; `activations[0]` is the
/// input, `activations[i]` the post-activation output of layer `i-1`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Array2<f64>>,
}

impl Mlp {
    /// Uniform fan-in init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
    pub fn new<R: Rng>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(NpqlError::InvalidConfig(
                "mlp needs at least input and output sizes".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(NpqlError::InvalidConfig("zero layer size".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight =
                Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..bound));
            weights.push(weight);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    fn check_input(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.in_dim() {
            return Err(NpqlError::ShapeMismatch(format!(
                "expected input dim {}, got {}",
                self.in_dim(),
                inputs.ncols()
            )));
        }
        Ok(())
    }

    /// Forward pass over a batch `[batch, in_dim] -> [batch, out_dim]`.
    pub fn forward(&self, inputs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(inputs)?.0)
    }

    /// Forward pass that keeps the per-layer activations needed by [`Mlp::backward`].
    pub fn forward_cached(&self, inputs: &ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(inputs)?;
        let n_layers = self.weights.len();
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(inputs.to_owned());
        let mut h = inputs.to_owned();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.dot(&w.t());
            z += b;
            if i + 1 < n_layers {
                z.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(z.clone());
            h = z;
        }
        let out = activations.last().unwrap().clone();
        Ok((out, ForwardCache { activations }))
    }

    /// Gradients of `sum(upstream ⊙ output)` w.r.t. every parameter and the inputs.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &ArrayView2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        let n_layers = self.weights.len();
        if upstream.ncols() != self.out_dim()
            || upstream.nrows() != cache.activations[0].nrows()
        {
            return Err(NpqlError::ShapeMismatch(format!(
                "upstream grad {:?} does not match output [{}, {}]",
                upstream.shape(),
                cache.activations[0].nrows(),
                self.out_dim()
            )));
        }
        let mut d_weights = Vec::with_capacity(n_layers);
        let mut d_biases = Vec::with_capacity(n_layers);
        let mut delta = upstream.to_owned();
        for l in (0..n_layers).rev() {
            let layer_in = &cache.activations[l];
            d_weights.push(delta.t().dot(layer_in));
            d_biases.push(delta.sum_axis(Axis(0)));
            let mut prev = delta.dot(&self.weights[l]);
            if l > 0 {
                // relu derivative from the post-activation value
                prev.zip_mut_with(&cache.activations[l], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            delta = prev;
        }
        d_weights.reverse();
        d_biases.reverse();
        Ok((
            MlpGrads {
                weights: d_weights,
                biases: d_biases,
            },
            delta,
        ))
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Flat parameter vector (weights then bias, layer by layer).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(NpqlError::ShapeMismatch(format!(
                "expected {} params, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut idx = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = params[idx];
                idx += 1;
            }
            for v in b.iter_mut() {
                *v = params[idx];
                idx += 1;
            }
        }
        Ok(())
    }

    pub fn params_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl MlpGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: mlp.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            *w *= s;
        }
        for b in &mut self.biases {
            *b *= s;
        }
    }
}

/// Adam state over a flat parameter vector. Moment vectors mirror the
/// parameter layout exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One Adam update with bias correction. Returns `false` (and leaves params
/// and moments untouched) when any gradient entry is non-finite; the caller
/// counts skipped updates in its metrics.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NpqlError::ShapeMismatch(format!(
            "adam: params {} grads {} moments {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(true)
}

/// target <- (1 - rate) * target + rate * online, elementwise.
pub fn polyak_update(target: &mut Mlp, online: &Mlp, rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(NpqlError::InvalidConfig(format!(
            "polyak rate must be in (0, 1], got {rate}"
        )));
    }
    if target.layer_sizes != online.layer_sizes {
        return Err(NpqlError::ShapeMismatch("polyak: mismatched layouts".into()));
    }
    for (t, o) in target.weights.iter_mut().zip(&online.weights) {
        t.zip_mut_with(o, |t, &o| *t = (1.0 - rate) * *t + rate * o);
    }
    for (t, o) in target.biases.iter_mut().zip(&online.biases) {
        t.zip_mut_with(o, |t, &o| *t = (1.0 - rate) * *t + rate * o);
    }
    Ok(())
}
