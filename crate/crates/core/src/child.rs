//! The continuously parametrized child classifier.
//!
//! Input features go through a soft selection of fixed preprocessing modules
//! (weights `softmax(gamma)`), then through `L` parametrized layers, then a
//! linear softmax head. Parametrized layer `j` runs all `p` base layers on its
//! input, zero-pads each output at the tail to the common width, mixes them
//! with `softmax(alpha_j)` and gates the result against a bypass:
//!
//! ```text
//! o(x) = sum_i softmax(alpha_j)_i * pad(o_i(x))
//! y    = g_j * o(x) + (1 - g_j) * x,      g_j = sigmoid(beta_j)
//! ```
//!
//! The encoding is a constant input; only base layers and the head train.

use std::cell::Cell;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{ArchitectureEncoding, SearchSpaceSpec};
use crate::nn::{softmax, Activation, DenseLayer, LayerGrads, OptimizerKind, OptimizerState};
use crate::seeding::gaussian;
use crate::task::{random_orthogonal, Split, TaskDataset};
use crate::{seeding, Error, Result};

thread_local! {
    static TRAIN_STEPS: Cell<u64> = const { Cell::new(0) };
}

/// Child-model optimizer steps taken on the current thread since it started.
pub fn training_steps_on_this_thread() -> u64 {
    TRAIN_STEPS.with(|c| c.get())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChildTrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ChildTrainConfig {
    /// Adam at 1e-4 for 20 epochs.
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::adam(),
            learning_rate: 1e-4,
            epochs: 20,
            batch_size: 32,
        }
    }
}

impl ChildTrainConfig {
    /// Short schedule for desk-scale runs on the small search space.
    pub fn desk() -> Self {
        Self {
            optimizer: OptimizerKind::adam(),
            learning_rate: 1e-2,
            epochs: 10,
            batch_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed preprocessing maps `R^d -> R^width`, shared by every child built in
/// a given space.
///
/// Module 0 is identity with zero padding. Module `e >= 1` projects onto a
/// random subspace of rank `max(1, min(d, width) >> 2(e-1))` and mixes it back
/// out to the full width, so later modules discard progressively more of the
/// input.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocBank {
    in_dim: usize,
    width: usize,
    /// Row-major `width x in_dim` matrices.
    modules: Vec<Vec<f64>>,
}

impl PreprocBank {
    pub fn new(space: &SearchSpaceSpec, in_dim: usize) -> Self {
        let width = space.width();
        let seed = seeding::derive(
            seeding::tag(&space.fingerprint()),
            &[in_dim as u64, seeding::tag("preproc")],
        );
        let mut rng = seeding::rng(seed);
        let full = in_dim.min(width);
        let modules = (0..space.num_preproc_modules)
            .map(|e| {
                let mut m = vec![0.0; width * in_dim];
                if e == 0 {
                    for i in 0..full {
                        m[i * in_dim + i] = 1.0;
                    }
                    return m;
                }
                let rank = (full >> (2 * (e - 1))).max(1);
                let basis = random_orthogonal(in_dim, &mut rng);
                let scale = 1.0 / (rank as f64).sqrt();
                let mix: Vec<f64> = (0..width * rank)
                    .map(|_| scale * gaussian(&mut rng))
                    .collect();
                for o in 0..width {
                    for (r, b) in basis.iter().take(rank).enumerate() {
                        let c = mix[o * rank + r];
                        for i in 0..in_dim {
                            m[o * in_dim + i] += c * b[i];
                        }
                    }
                }
                m
            })
            .collect();
        Self {
            in_dim,
            width,
            modules,
        }
    }

    pub fn num_modules(&self) -> usize {
        self.modules.len()
    }

    /// `sum_e weights[e] * M_e x`.
    pub fn apply(&self, weights: &[f64], x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        for (m, &w) in self.modules.iter().zip(weights) {
            for (o, row) in out.iter_mut().zip(m.chunks_exact(self.in_dim)) {
                *o += w * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParametrizedLayer {
    base: Vec<DenseLayer>,
    mix: Vec<f64>,
    gate: f64,
}

/// Per-layer trace for backprop.
#[derive(Debug, Clone)]
struct LayerTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    out: Vec<Vec<f64>>,
}

impl ParametrizedLayer {
    pub fn base_layers(&self) -> &[DenseLayer] {
        &self.base
    }

    pub fn base_layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.base
    }

    pub fn mixing_weights(&self) -> &[f64] {
        &self.mix
    }

    pub fn gate(&self) -> f64 {
        self.gate
    }

    fn forward_traced(&self, x: &[f64]) -> (Vec<f64>, LayerTrace) {
        let width = x.len();
        let mut mixed = vec![0.0; width];
        let mut pre = Vec::with_capacity(self.base.len());
        let mut out = Vec::with_capacity(self.base.len());
        for (layer, &w) in self.base.iter().zip(&self.mix) {
            let (mut p, mut o) = (Vec::new(), Vec::new());
            layer.forward_into(x, &mut p, &mut o);
            // zero padding at the tail: only the first `size` slots receive mass
            for (m, v) in mixed.iter_mut().zip(&o) {
                *m += w * v;
            }
            pre.push(p);
            out.push(o);
        }
        let g = self.gate;
        let y = mixed
            .iter()
            .zip(x)
            .map(|(o, xi)| g * o + (1.0 - g) * xi)
            .collect();
        (
            y,
            LayerTrace {
                input: x.to_vec(),
                pre,
                out,
            },
        )
    }

    fn backward(&self, trace: &LayerTrace, dy: &[f64], grads: &mut [LayerGrads]) -> Vec<f64> {
        let g = self.gate;
        let mut dx: Vec<f64> = dy.iter().map(|d| (1.0 - g) * d).collect();
        for (i, layer) in self.base.iter().enumerate() {
            let scale = g * self.mix[i];
            let dout: Vec<f64> = dy[..layer.out_dim()].iter().map(|d| scale * d).collect();
            let dxi = layer.backward_accumulate(
                &trace.input,
                &trace.pre[i],
                &trace.out[i],
                &dout,
                &mut grads[i],
            );
            dx.iter_mut().zip(dxi).for_each(|(a, b)| *a += b);
        }
        dx
    }
}

/// Gradients for every trainable child parameter.
#[derive(Debug, Clone)]
pub struct ChildGrads {
    pub layers: Vec<Vec<LayerGrads>>,
    pub head: LayerGrads,
}

impl ChildGrads {
    fn zeros_like(model: &ChildModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| l.base.iter().map(LayerGrads::zeros_like).collect())
                .collect(),
            head: LayerGrads::zeros_like(&model.head),
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flatten()
            .chain(std::iter::once(&self.head))
            .flat_map(|g| [g.weights.as_slice(), g.bias.as_slice()])
            .collect()
    }

    fn reset(&mut self) {
        self.layers
            .iter_mut()
            .flatten()
            .chain(std::iter::once(&mut self.head))
            .for_each(|g| g.scale(0.0));
    }
}

pub struct ChildTrace {
    layers: Vec<LayerTrace>,
    hidden: Vec<f64>,
    head_pre: Vec<f64>,
    logits: Vec<f64>,
}

impl ChildTrace {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChildModel {
    encoding: ArchitectureEncoding,
    module_weights: Vec<f64>,
    preproc: PreprocBank,
    layers: Vec<ParametrizedLayer>,
    head: DenseLayer,
}

impl ChildModel {
    /// Builds a child for `encoding` with freshly initialised base layers and
    /// head. The layer count is `L * p` base layers plus the head.
    pub fn build<R: Rng + ?Sized>(
        encoding: &ArchitectureEncoding,
        space: &SearchSpaceSpec,
        feature_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        space.validate()?;
        encoding.check_space(space)?;
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidInput(
                "feature_dim and num_classes must be positive".into(),
            ));
        }
        let width = space.width();
        let layers = (0..space.num_layers)
            .map(|j| {
                let base = (0..space.num_base_layers())
                    .map(|i| {
                        let (size, act) = space.base_layer(i);
                        DenseLayer::glorot(width, size, act, rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ParametrizedLayer {
                    base,
                    mix: encoding.mixing_weights(j)?,
                    gate: encoding.layer_gate(j)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = DenseLayer::glorot(width, num_classes, Activation::Identity, rng)?;
        Ok(Self {
            encoding: encoding.clone(),
            module_weights: encoding.module_weights()?,
            preproc: PreprocBank::new(space, feature_dim),
            layers,
            head,
        })
    }

    pub fn encoding(&self) -> &ArchitectureEncoding {
        &self.encoding
    }

    pub fn width(&self) -> usize {
        self.head.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.preproc.in_dim
    }

    pub fn num_base_layers(&self) -> usize {
        self.layers.iter().map(|l| l.base.len()).sum()
    }

    pub fn layers(&self) -> &[ParametrizedLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ParametrizedLayer] {
        &mut self.layers
    }

    pub fn head(&self) -> &DenseLayer {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut DenseLayer {
        &mut self.head
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.base)
            .map(DenseLayer::num_params)
            .sum::<usize>()
            + self.head.num_params()
    }

    /// Soft-selected preprocessing of raw features.
    pub fn preprocess(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.preproc.in_dim {
            return Err(Error::InvalidInput(format!(
                "expected {} features, got {}",
                self.preproc.in_dim,
                x.len()
            )));
        }
        Ok(self.preproc.apply(&self.module_weights, x))
    }

    /// Output of parametrized layer `layer_index` (gated, full width).
    pub fn parametrized_layer_forward(&self, layer_index: usize, x: &[f64]) -> Result<Vec<f64>> {
        let layer = self.layers.get(layer_index).ok_or(Error::OutOfRange {
            index: layer_index,
            len: self.layers.len(),
        })?;
        if x.len() != self.width() {
            return Err(Error::InvalidInput(format!(
                "parametrized layer expects width {}, got {}",
                self.width(),
                x.len()
            )));
        }
        Ok(layer.forward_traced(x).0)
    }

    /// Forward from a preprocessed input to logits, with a trace.
    pub fn forward_hidden(&self, h0: &[f64]) -> Result<ChildTrace> {
        if h0.len() != self.width() {
            return Err(Error::InvalidInput(format!(
                "expected width {}, got {}",
                self.width(),
                h0.len()
            )));
        }
        let mut h = h0.to_vec();
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, t) = layer.forward_traced(&h);
            traces.push(t);
            h = y;
        }
        let (mut pre, mut logits) = (Vec::new(), Vec::new());
        self.head.forward_into(&h, &mut pre, &mut logits);
        Ok(ChildTrace {
            layers: traces,
            hidden: h,
            head_pre: pre,
            logits,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h0 = self.preprocess(x)?;
        Ok(self.forward_hidden(&h0)?.logits)
    }

    /// Accumulates parameter gradients; returns the gradient wrt the
    /// preprocessed input.
    pub fn backward(
        &self,
        trace: &ChildTrace,
        dlogits: &[f64],
        grads: &mut ChildGrads,
    ) -> Vec<f64> {
        let mut dh = self.head.backward_accumulate(
            &trace.hidden,
            &trace.head_pre,
            &trace.logits,
            dlogits,
            &mut grads.head,
        );
        for (j, layer) in self.layers.iter().enumerate().rev() {
            dh = layer.backward(&trace.layers[j], &dh, &mut grads.layers[j]);
        }
        dh
    }

    pub fn zero_grads(&self) -> ChildGrads {
        ChildGrads::zeros_like(self)
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let Self { layers, head, .. } = self;
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in layers.iter_mut() {
            for b in l.base.iter_mut() {
                let (w, bias) = b.params_mut();
                out.push(w);
                out.push(bias);
            }
        }
        let (w, bias) = head.params_mut();
        out.push(w);
        out.push(bias);
        out
    }

    /// Argmax class (lowest index on ties).
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Fraction of correct predictions on a split.
    pub fn accuracy(&self, dataset: &TaskDataset, split: Split) -> Result<f64> {
        let idx = dataset.split(split);
        if idx.is_empty() {
            return Err(Error::InvalidInput(format!("{split:?} split is empty")));
        }
        let mut correct = 0usize;
        for &i in idx {
            if self.predict(&dataset.features()[i])? == dataset.labels()[i] {
                correct += 1;
            }
        }
        Ok(correct as f64 / idx.len() as f64)
    }

    /// Mini-batch cross-entropy training of base layers and head.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        dataset: &TaskDataset,
        config: &ChildTrainConfig,
        rng: &mut R,
    ) -> Result<()> {
        config.validate()?;
        let train = dataset.split(Split::Train);
        if train.is_empty() {
            return Err(Error::InvalidInput("train split is empty".into()));
        }
        if dataset.num_classes() > self.head.out_dim() {
            return Err(Error::InvalidInput(
                "dataset has more classes than the head".into(),
            ));
        }
        // gamma and the modules are frozen, so the preprocessed inputs are too
        let inputs: Vec<Vec<f64>> = train
            .iter()
            .map(|&i| self.preprocess(&dataset.features()[i]))
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = train.iter().map(|&i| dataset.labels()[i]).collect();
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut opt = OptimizerState::new(config.optimizer, config.learning_rate)?;
        let mut grads = self.zero_grads();
        for _ in 0..config.epochs {
            order.shuffle(rng);
            for batch in order.chunks(config.batch_size) {
                grads.reset();
                let scale = 1.0 / batch.len() as f64;
                for &k in batch {
                    let trace = self.forward_hidden(&inputs[k])?;
                    let mut d = softmax(&trace.logits)?;
                    d[labels[k]] -= 1.0;
                    d.iter_mut().for_each(|v| *v *= scale);
                    self.backward(&trace, &d, &mut grads);
                }
                let g = grads.slices();
                opt.step(&mut self.params_mut(), &g)?;
                TRAIN_STEPS.with(|c| c.set(c.get() + 1));
            }
        }
        Ok(())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Builds, trains and scores a child; returns validation accuracy.
pub fn train_and_score<R: Rng + ?Sized>(
    encoding: &ArchitectureEncoding,
    space: &SearchSpaceSpec,
    dataset: &TaskDataset,
    config: &ChildTrainConfig,
    rng: &mut R,
) -> Result<f64> {
    Ok(train_child(encoding, space, dataset, config, rng)?.accuracy(dataset, Split::Validation)?)
}

/// Builds and trains a child; the caller picks which split to score.
pub fn train_child<R: Rng + ?Sized>(
    encoding: &ArchitectureEncoding,
    space: &SearchSpaceSpec,
    dataset: &TaskDataset,
    config: &ChildTrainConfig,
    rng: &mut R,
) -> Result<ChildModel> {
    if dataset.split(Split::Validation).is_empty() {
        return Err(Error::InvalidInput("validation split is empty".into()));
    }
    let mut model = ChildModel::build(
        encoding,
        space,
        dataset.feature_dim(),
        dataset.num_classes(),
        rng,
    )?;
    model.train(dataset, config, rng)?;
    Ok(model)
}
