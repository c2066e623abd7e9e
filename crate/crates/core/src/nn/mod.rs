//! Minimal dense neural-network engine with exact analytic gradients.
//!
//! Shared by the child classifiers and the value network. Everything is `f64`
//! and row-major; a layer computes `y = act(W x + b)` with `W` of shape
//! `(out_dim, in_dim)`.

mod optim;

pub use optim::{OptimizerKind, OptimizerState};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
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
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of empty vector".into()));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index: i,
            context: "softmax logits".into(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Backprop through softmax: given `p = softmax(l)` and `dL/dp`, returns `dL/dl`.
pub fn softmax_backward(probs: &[f64], grad: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad).map(|(p, g)| p * g).sum();
    probs.iter().zip(grad).map(|(p, g)| p * (g - dot)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    /// Row-major, shape (out_dim, in_dim).
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidInput(format!(
                "layer dims must be positive, got {in_dim}x{out_dim}"
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            activation,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::zeros(in_dim, out_dim, activation)?;
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-limit..=limit);
        }
        Ok(layer)
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let layer = Self {
            in_dim,
            out_dim,
            activation,
            weights,
            bias,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::InvalidInput("layer dims must be positive".into()));
        }
        if self.weights.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::InvalidInput(format!(
                "layer {}x{} has {} weights and {} biases",
                self.out_dim,
                self.in_dim,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if let Some(i) = self
            .weights
            .iter()
            .chain(&self.bias)
            .position(|v| !v.is_finite())
        {
            return Err(Error::NonFinite {
                index: i,
                context: "layer parameters".into(),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Disjoint mutable views of (weights, bias).
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weights, &mut self.bias)
    }

    /// Writes the pre-activation and the activated output for `x`.
    pub fn forward_into(&self, x: &[f64], pre: &mut Vec<f64>, out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        pre.clear();
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            let z = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b;
            pre.push(z);
            out.push(self.activation.apply(z));
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (mut pre, mut out) = (Vec::new(), Vec::new());
        self.forward_into(x, &mut pre, &mut out);
        Ok(out)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim {
            return Err(Error::InvalidInput(format!(
                "expected input of dim {}, got {}",
                self.in_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    ///
    /// `pre` and `out` must come from `forward_into(x, ..)` on this layer.
    pub fn backward_accumulate(
        &self,
        x: &[f64],
        pre: &[f64],
        out: &[f64],
        out_grad: &[f64],
        grads: &mut LayerGrads,
    ) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let dz = out_grad[o] * self.activation.derivative(pre[o], out[o]);
            if dz == 0.0 {
                continue;
            }
            grads.bias[o] += dz;
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grads.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += dz * x[i];
                dx[i] += dz * row[i];
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights
            .iter_mut()
            .chain(&mut self.bias)
            .for_each(|g| *g *= s);
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    /// Bumped on every mutable parameter access; caches carry it so a stale
    /// cache is rejected by `backward`.
    #[serde(skip)]
    generation: u64,
}

/// Activation trace recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// inputs[l] is the input to layer l; inputs[L] is the network output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp.layers.iter().map(LayerGrads::zeros_like).collect(),
        }
    }

    /// Flat view in the same order as [`Mlp::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| [g.weights.as_slice(), g.bias.as_slice()])
            .collect()
    }

    pub fn scale(&mut self, s: f64) {
        self.layers.iter_mut().for_each(|g| g.scale(s));
    }

    pub fn reset(&mut self) {
        self.scale(0.0);
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let mlp = Self {
            layers,
            generation: 0,
        };
        mlp.validate()?;
        Ok(mlp)
    }

    /// Builds a Glorot-initialised MLP with `dims = [in, h1, ..., out]`.
    pub fn glorot<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::InvalidInput(format!(
                "{} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &a)| DenseLayer::glorot(w[0], w[1], a, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidInput("mlp needs at least one layer".into()));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::InvalidInput(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Flat mutable view: `[w0, b0, w1, b1, ...]`.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::InvalidInput(format!(
                "expected input of dim {}, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pres = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        for layer in &self.layers {
            let (mut pre, mut out) = (Vec::new(), Vec::new());
            layer.forward_into(inputs.last().unwrap(), &mut pre, &mut out);
            pres.push(pre);
            inputs.push(out);
        }
        let output = inputs.last().unwrap().clone();
        Ok((
            output,
            ForwardCache {
                generation: self.generation,
                inputs,
                pre: pres,
            },
        ))
    }

    /// Forward pass without recording a cache.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let (mut pre, mut out) = (Vec::new(), Vec::new());
        for layer in &self.layers {
            layer.forward_into(&cur, &mut pre, &mut out);
            std::mem::swap(&mut cur, &mut out);
        }
        Ok(cur)
    }

    fn check_cache(&self, cache: &ForwardCache, out_grad: &[f64]) -> Result<()> {
        if cache.generation != self.generation {
            return Err(Error::InvalidState(format!(
                "cache from generation {} used with model generation {}",
                cache.generation, self.generation
            )));
        }
        if cache.pre.len() != self.layers.len()
            || cache
                .pre
                .iter()
                .zip(&self.layers)
                .any(|(p, l)| p.len() != l.out_dim)
            || cache.inputs[0].len() != self.in_dim()
        {
            return Err(Error::InvalidState(
                "cache shape does not match model".into(),
            ));
        }
        if out_grad.len() != self.out_dim() {
            return Err(Error::InvalidInput(format!(
                "output gradient has dim {}, expected {}",
                out_grad.len(),
                self.out_dim()
            )));
        }
        Ok(())
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        out_grad: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>> {
        self.check_cache(cache, out_grad)?;
        if grads.layers.len() != self.layers.len() {
            return Err(Error::InvalidInput("gradient buffer shape mismatch".into()));
        }
        let mut g = out_grad.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward_accumulate(
                &cache.inputs[l],
                &cache.pre[l],
                &cache.inputs[l + 1],
                &g,
                &mut grads.layers[l],
            );
        }
        Ok(g)
    }

    pub fn backward(&self, cache: &ForwardCache, out_grad: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let mut grads = MlpGrads::zeros_like(self);
        let dx = self.backward_accumulate(cache, out_grad, &mut grads)?;
        Ok((grads, dx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn identity_layer(n: usize, act: Activation) -> DenseLayer {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        DenseLayer::from_parts(n, n, act, w, vec![0.0; n]).unwrap()
    }

    #[test]
    fn identity_and_relu_forward() {
        let mlp = Mlp::new(vec![identity_layer(2, Activation::Identity)]).unwrap();
        assert_eq!(mlp.forward(&[1.0, 2.0]).unwrap().0, vec![1.0, 2.0]);
        let mlp = Mlp::new(vec![identity_layer(2, Activation::Relu)]).unwrap();
        assert_eq!(mlp.forward(&[-1.0, 3.0]).unwrap().0, vec![0.0, 3.0]);
    }

    #[test]
    fn two_layer_hand_computed() {
        // h = relu([[1,-1],[0.5,2]] x + [0.1,-0.2]); y = [2,-3] h + 0.5
        let l1 = DenseLayer::from_parts(
            2,
            2,
            Activation::Relu,
            vec![1.0, -1.0, 0.5, 2.0],
            vec![0.1, -0.2],
        )
        .unwrap();
        let l2 =
            DenseLayer::from_parts(2, 1, Activation::Identity, vec![2.0, -3.0], vec![0.5]).unwrap();
        let mlp = Mlp::new(vec![l1, l2]).unwrap();
        // x = [3, 1]: pre = [2.1, 3.3], h = [2.1, 3.3], y = 4.2 - 9.9 + 0.5 = -5.2
        let y = mlp.forward(&[3.0, 1.0]).unwrap().0;
        assert!((y[0] + 5.2).abs() < 1e-12);
        // x = [-1, 0]: pre = [-0.9, -0.7] -> h = 0, y = 0.5
        let y = mlp.forward(&[-1.0, 0.0]).unwrap().0;
        assert_eq!(y, vec![0.5]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mlp = Mlp::new(vec![identity_layer(2, Activation::Identity)]).unwrap();
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::InvalidInput(_))));
        let bad = Mlp::new(vec![
            identity_layer(2, Activation::Identity),
            identity_layer(3, Activation::Identity),
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn identity_backward() {
        let mlp = Mlp::new(vec![identity_layer(2, Activation::Identity)]).unwrap();
        let (_, cache) = mlp.forward(&[0.3, -0.7]).unwrap();
        let (_, dx) = mlp.backward(&cache, &[1.0, 0.0]).unwrap();
        assert_eq!(dx, vec![1.0, 0.0]);
    }

    #[test]
    fn tanh_input_gradient_at_zero() {
        let l = DenseLayer::from_parts(1, 1, Activation::Tanh, vec![2.0], vec![0.0]).unwrap();
        let mlp = Mlp::new(vec![l]).unwrap();
        let (_, cache) = mlp.forward(&[0.0]).unwrap();
        let (_, dx) = mlp.backward(&cache, &[1.0]).unwrap();
        assert_eq!(dx, vec![2.0]);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = seeding::rng(3);
        let mut mlp = Mlp::glorot(
            &[3, 4, 1],
            &[Activation::Tanh, Activation::Identity],
            &mut rng,
        )
        .unwrap();
        let (_, cache) = mlp.forward(&[0.1, 0.2, 0.3]).unwrap();
        mlp.params_mut()[0][0] += 0.1;
        assert!(matches!(
            mlp.backward(&cache, &[1.0]),
            Err(Error::InvalidState(_))
        ));
        let other = Mlp::glorot(
            &[3, 5, 1],
            &[Activation::Tanh, Activation::Identity],
            &mut rng,
        )
        .unwrap();
        let (_, cache) = other.forward(&[0.1, 0.2, 0.3]).unwrap();
        let mlp = Mlp::glorot(
            &[3, 4, 1],
            &[Activation::Tanh, Activation::Identity],
            &mut rng,
        )
        .unwrap();
        assert!(matches!(
            mlp.backward(&cache, &[1.0]),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
        assert!(matches!(softmax(&[]), Err(Error::InvalidInput(_))));
        // Direct evaluation: e^k / (e + e^2 + e^3).
        let e = std::f64::consts::E;
        let denom = e + e * e + e * e * e;
        let expected = [e / denom, e * e / denom, e * e * e / denom];
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((expected[0] - 0.090_030_573_170_380_46).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(1.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-16);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_ignores_shifts(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -500.0f64..500.0,
        ) {
            let p = softmax(&logits).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            for (a, b) in p.iter().zip(softmax(&shifted).unwrap()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn forward_is_bitwise_deterministic(
            seed in any::<u64>(),
            x in proptest::collection::vec(-3.0f64..3.0, 5),
        ) {
            let mut rng = seeding::rng(seed);
            let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
            let mlp = Mlp::glorot(&[5, 7, 4, 3], &acts, &mut rng).unwrap();
            let a = mlp.predict(&x).unwrap();
            let b = mlp.clone().predict(&x).unwrap();
            prop_assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
