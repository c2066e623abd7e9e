//! The deep value network.
//!
//! `v(u, z) = rho([u, z, meta])` where `z` is the mean of a per-sample
//! embedding `phi(x)` over a batch of task rows (features plus one-hot label)
//! and `meta` is the optional precomputed meta-feature vector. Which of `z`
//! and `meta` are present depends on [`MetaMode`].

use std::collections::BTreeSet;
use std::path::Path;

use log::warn;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::db::{write_atomic, ExperimentDb, Triplet};
use crate::encoding::{SearchSpaceSpec, HOT};
use crate::nn::{Activation, ForwardCache, Mlp, MlpGrads, OptimizerKind, OptimizerState};
use crate::task::{compute_meta_features, sample_batch, Split, TaskDataset, META_FEATURE_DIM};
use crate::{Error, Result};

/// Widths of the set-embedding tower; the last one is the embedding size.
pub const PHI_HIDDEN: [usize; 2] = [50, 50];
/// Hidden widths of the predictor tower (a scalar output layer follows).
pub const RHO_HIDDEN: [usize; 2] = [50, 10];

/// Fixed scaling of the encoding on its way into `rho`, bringing one-hot
/// logits to the unit scale of the task inputs.
pub const U_SCALE: f64 = 1.0 / HOT;

pub const CHECKPOINT_FORMAT: &str = "archinfer-dvn";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    NoMeta,
    PrecomputedMeta,
    LearnedMeta,
    Both,
}

impl MetaMode {
    pub fn uses_learned(self) -> bool {
        matches!(self, MetaMode::LearnedMeta | MetaMode::Both)
    }

    pub fn uses_precomputed(self) -> bool {
        matches!(self, MetaMode::PrecomputedMeta | MetaMode::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetaMode::NoMeta => "no_meta",
            MetaMode::PrecomputedMeta => "precomputed_meta",
            MetaMode::LearnedMeta => "learned_meta",
            MetaMode::Both => "both",
        }
    }
}

impl std::str::FromStr for MetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_meta" => Ok(MetaMode::NoMeta),
            "precomputed_meta" => Ok(MetaMode::PrecomputedMeta),
            "learned_meta" => Ok(MetaMode::LearnedMeta),
            "both" => Ok(MetaMode::Both),
            other => Err(Error::InvalidInput(format!("unknown meta mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DvnTrainConfig {
    pub k_inner_iters: usize,
    pub k_outer_iters: usize,
    /// Triplets per minibatch (all from one task).
    pub minibatch_size: usize,
    /// Task rows per embedding batch.
    pub task_batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_steps: usize,
    /// Early stop once the mean loss over the last window improves on the
    /// previous window by less than `convergence_tol`.
    pub convergence_window: usize,
    pub convergence_tol: f64,
}

impl Default for DvnTrainConfig {
    fn default() -> Self {
        Self {
            k_inner_iters: 2,
            k_outer_iters: 1,
            minibatch_size: 32,
            task_batch_size: 128,
            learning_rate: 1e-4,
            momentum: 0.5,
            max_steps: 20_000,
            convergence_window: 500,
            convergence_tol: 1e-5,
        }
    }
}

impl DvnTrainConfig {
    /// Shorter, faster schedule for desk-scale experiments.
    pub fn desk() -> Self {
        Self {
            task_batch_size: 128,
            learning_rate: 3e-2,
            max_steps: 3_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_inner_iters == 0
            || self.k_outer_iters == 0
            || self.minibatch_size == 0
            || self.task_batch_size == 0
            || self.convergence_window == 0
        {
            return Err(Error::InvalidInput(
                "dvn iteration counts and batch sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Task-side inputs of the value network.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskContext {
    pub z: Option<Vec<f64>>,
    pub meta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DvnModel {
    mode: MetaMode,
    fingerprint: String,
    encoding_len: usize,
    /// Width of a task row: features + class cap.
    row_dim: usize,
    class_cap: usize,
    phi: Option<Mlp>,
    rho: Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    mode: MetaMode,
    fp: String,
    encoding_len: usize,
    row_dim: usize,
    class_cap: usize,
    phi: Option<Mlp>,
    rho: Mlp,
    train_config: Option<DvnTrainConfig>,
}

/// One optimizer step of Algorithm-1 style training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Index of the outer repeat (task draw) this step belongs to.
    pub round: usize,
    pub task: String,
    pub outer: usize,
    pub inner: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub stopped_early: bool,
    pub tasks_used: Vec<String>,
    pub skipped_tasks: Vec<String>,
    /// Every experiment record that contributed a triplet.
    pub record_ids: BTreeSet<usize>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Weight gradients in the same order as [`DvnModel::flat_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct DvnGrads {
    pub phi: Option<MlpGrads>,
    pub rho: MlpGrads,
}

impl DvnGrads {
    pub fn zeros_like(model: &DvnModel) -> Self {
        Self {
            phi: model.phi.as_ref().map(MlpGrads::zeros_like),
            rho: MlpGrads::zeros_like(&model.rho),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.phi
            .iter()
            .flat_map(MlpGrads::slices)
            .chain(self.rho.slices())
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

impl DvnModel {
    pub fn new<R: Rng + ?Sized>(
        mode: MetaMode,
        space: &SearchSpaceSpec,
        feature_dim: usize,
        class_cap: usize,
        rng: &mut R,
    ) -> Result<Self> {
        space.validate()?;
        let row_dim = feature_dim + class_cap;
        let phi = if mode.uses_learned() {
            Some(Mlp::glorot(
                &[row_dim, PHI_HIDDEN[0], PHI_HIDDEN[1]],
                &[Activation::Tanh, Activation::Tanh],
                rng,
            )?)
        } else {
            None
        };
        let encoding_len = space.encoding_len();
        let mut rho_in = encoding_len;
        if mode.uses_learned() {
            rho_in += PHI_HIDDEN[1];
        }
        if mode.uses_precomputed() {
            rho_in += META_FEATURE_DIM;
        }
        let rho = Mlp::glorot(
            &[rho_in, RHO_HIDDEN[0], RHO_HIDDEN[1], 1],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            rng,
        )?;
        Ok(Self {
            mode,
            fingerprint: space.fingerprint(),
            encoding_len,
            row_dim,
            class_cap,
            phi,
            rho,
        })
    }

    pub fn mode(&self) -> MetaMode {
        self.mode
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn encoding_len(&self) -> usize {
        self.encoding_len
    }

    pub fn class_cap(&self) -> usize {
        self.class_cap
    }

    pub fn phi(&self) -> Option<&Mlp> {
        self.phi.as_ref()
    }

    pub fn phi_mut(&mut self) -> Option<&mut Mlp> {
        self.phi.as_mut()
    }

    pub fn rho(&self) -> &Mlp {
        &self.rho
    }

    /// Replaces the predictor tower; its input width must stay the same.
    pub fn set_rho(&mut self, rho: Mlp) -> Result<()> {
        if rho.in_dim() != self.rho.in_dim() || rho.out_dim() != 1 {
            return Err(Error::InvalidInput(format!(
                "rho must map {} inputs to 1 output",
                self.rho.in_dim()
            )));
        }
        self.rho = rho;
        Ok(())
    }

    pub fn rho_mut(&mut self) -> &mut Mlp {
        &mut self.rho
    }

    pub fn num_params(&self) -> usize {
        self.rho.num_params() + self.phi.as_ref().map_or(0, Mlp::num_params)
    }

    /// All weights in a fixed order (phi first).
    pub fn flat_params(&self) -> Vec<f64> {
        self.phi
            .iter()
            .flat_map(|p| p.params())
            .chain(self.rho.params())
            .flat_map(|s| s.iter().copied())
            .collect()
    }

    /// Mean of `phi` over the batch rows.
    pub fn embed_task(&self, batch: &[Vec<f64>]) -> Result<Vec<f64>> {
        let phi = self.phi.as_ref().ok_or_else(|| {
            Error::InvalidState(format!(
                "mode {} has no learned embedding",
                self.mode.name()
            ))
        })?;
        if batch.is_empty() {
            return Err(Error::InvalidInput("cannot embed an empty batch".into()));
        }
        let mut z = vec![0.0; phi.out_dim()];
        for row in batch {
            for (a, b) in z.iter_mut().zip(phi.predict(row)?) {
                *a += b;
            }
        }
        let n = batch.len() as f64;
        z.iter_mut().for_each(|v| *v /= n);
        Ok(z)
    }

    /// Task inputs computed from a whole dataset: `z` over the full training
    /// split and/or the precomputed meta-features.
    pub fn context_for(&self, dataset: &TaskDataset) -> Result<TaskContext> {
        let z = if self.mode.uses_learned() {
            Some(self.embed_task(&dataset.split_rows(Split::Train, self.class_cap)?)?)
        } else {
            None
        };
        let meta = self
            .mode
            .uses_precomputed()
            .then(|| compute_meta_features(dataset));
        Ok(TaskContext { z, meta })
    }

    fn rho_input(&self, u: &[f64], ctx: &TaskContext) -> Result<Vec<f64>> {
        if u.len() != self.encoding_len {
            return Err(Error::InvalidInput(format!(
                "encoding has length {}, expected {}",
                u.len(),
                self.encoding_len
            )));
        }
        let mut x: Vec<f64> = u.iter().map(|v| v * U_SCALE).collect();
        if self.mode.uses_learned() {
            let z = ctx
                .z
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("missing task embedding".into()))?;
            if z.len() != PHI_HIDDEN[1] {
                return Err(Error::InvalidInput(format!(
                    "task embedding has length {}, expected {}",
                    z.len(),
                    PHI_HIDDEN[1]
                )));
            }
            x.extend_from_slice(z);
        }
        if self.mode.uses_precomputed() {
            let m = ctx
                .meta
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("missing precomputed meta-features".into()))?;
            if m.len() != META_FEATURE_DIM {
                return Err(Error::InvalidInput("meta-feature length mismatch".into()));
            }
            x.extend_from_slice(m);
        }
        Ok(x)
    }

    /// Predicted normalized performance.
    pub fn predict(&self, u: &[f64], ctx: &TaskContext) -> Result<f64> {
        Ok(self.rho.predict(&self.rho_input(u, ctx)?)?[0])
    }

    /// `(v, dv/du)` with the task context held fixed.
    pub fn value_and_grad(&self, u: &[f64], ctx: &TaskContext) -> Result<(f64, Vec<f64>)> {
        let (out, cache) = self.rho.forward(&self.rho_input(u, ctx)?)?;
        let mut dx = self.rho.backward(&cache, &[1.0])?.1;
        dx.truncate(self.encoding_len);
        dx.iter_mut().for_each(|g| *g *= U_SCALE);
        Ok((out[0], dx))
    }

    pub fn grad_wrt_u(&self, u: &[f64], ctx: &TaskContext) -> Result<Vec<f64>> {
        Ok(self.value_and_grad(u, ctx)?.1)
    }

    /// Mean squared error of `minibatch` under the embedding of `batch`, with
    /// gradients for every weight written to `grads` (overwritten, not
    /// accumulated). `batch` is ignored without a learned embedding.
    pub fn loss_and_grad(
        &self,
        batch: &[Vec<f64>],
        meta: Option<&[f64]>,
        minibatch: &[&Triplet],
        grads: &mut DvnGrads,
    ) -> Result<f64> {
        if minibatch.is_empty() {
            return Err(Error::InvalidInput("empty minibatch".into()));
        }
        let zlen = PHI_HIDDEN[1];
        let mut phi_caches: Vec<ForwardCache> = Vec::new();
        let mut z = None;
        if let Some(phi) = &self.phi {
            if batch.is_empty() {
                return Err(Error::InvalidInput("empty embedding batch".into()));
            }
            let mut acc = vec![0.0; zlen];
            for row in batch {
                let (out, cache) = phi.forward(row)?;
                acc.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
                phi_caches.push(cache);
            }
            let bn = batch.len() as f64;
            acc.iter_mut().for_each(|v| *v /= bn);
            z = Some(acc);
        }
        let ctx = TaskContext {
            z,
            meta: meta.map(<[f64]>::to_vec),
        };

        grads.rho.reset();
        let mut dz = vec![0.0; zlen];
        let mut loss = 0.0;
        let m = minibatch.len() as f64;
        for t in minibatch {
            let (out, cache) = self.rho.forward(&self.rho_input(&t.u, &ctx)?)?;
            let err = out[0] - t.target;
            loss += err * err / m;
            let dx = self
                .rho
                .backward_accumulate(&cache, &[2.0 * err / m], &mut grads.rho)?;
            if self.phi.is_some() {
                let off = self.encoding_len;
                dz.iter_mut()
                    .zip(&dx[off..off + zlen])
                    .for_each(|(a, b)| *a += b);
            }
        }
        if let (Some(phi), Some(pg)) = (&self.phi, grads.phi.as_mut()) {
            pg.reset();
            let scale = 1.0 / phi_caches.len() as f64;
            let g: Vec<f64> = dz.iter().map(|v| v * scale).collect();
            for cache in &phi_caches {
                phi.backward_accumulate(cache, &g, pg)?;
            }
        }
        Ok(loss)
    }

    /// Offline training on the database triplets of `tasks`.
    ///
    /// Each round draws a task, then `k_outer_iters` triplet minibatches from
    /// it; each minibatch gets `k_inner_iters` SGD-momentum steps, each with a
    /// fresh embedding batch from the task's training split. The loss is the
    /// mean squared error against per-task normalized targets. Tasks without
    /// records or with constant performance are skipped with a warning.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        db: &ExperimentDb,
        tasks: &[&TaskDataset],
        config: &DvnTrainConfig,
        rng: &mut R,
    ) -> Result<TrainLog> {
        config.validate()?;
        if db.fingerprint() != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found: db.fingerprint().to_string(),
            });
        }
        let mut pool = Vec::new();
        let mut skipped = Vec::new();
        for &task in tasks {
            match db.normalized_targets(&task.task_id) {
                Ok(t) if !t.is_empty() => pool.push((task, t)),
                Ok(_) | Err(Error::DegenerateTask(_)) | Err(Error::InvalidInput(_)) => {
                    warn!("skipping task {}: no usable records", task.task_id);
                    skipped.push(task.task_id.clone());
                }
                Err(e) => return Err(e),
            }
        }
        let mut log = self.train_on_triplets(&pool, config, rng)?;
        log.skipped_tasks = skipped;
        Ok(log)
    }

    /// Training loop over explicit `(task, triplets)` pairs.
    pub fn train_on_triplets<R: Rng + ?Sized>(
        &mut self,
        tasks: &[(&TaskDataset, Vec<Triplet>)],
        config: &DvnTrainConfig,
        rng: &mut R,
    ) -> Result<TrainLog> {
        config.validate()?;
        let mut log = TrainLog::default();
        let mut pool: Vec<(&TaskDataset, &[Triplet], Option<Vec<f64>>)> = Vec::new();
        for (task, triplets) in tasks {
            if triplets.is_empty() {
                continue;
            }
            log.record_ids.extend(triplets.iter().map(|x| x.record_id));
            log.tasks_used.push(task.task_id.clone());
            let meta = self
                .mode
                .uses_precomputed()
                .then(|| compute_meta_features(task));
            pool.push((task, triplets.as_slice(), meta));
        }
        if pool.is_empty() {
            return Err(Error::InvalidInput(
                "no non-degenerate task to train on".into(),
            ));
        }

        let mut opt = OptimizerState::new(
            OptimizerKind::sgd_momentum(config.momentum),
            config.learning_rate,
        )?;
        let mut grads = DvnGrads::zeros_like(self);
        let mut step = 0usize;
        let mut round = 0usize;
        'outer: while step < config.max_steps {
            let (task, triplets, meta) = &pool[rng.random_range(0..pool.len())];
            let (task, triplets) = (*task, *triplets);
            for outer in 0..config.k_outer_iters {
                let n = config.minibatch_size.min(triplets.len());
                let minibatch: Vec<&Triplet> = triplets.choose_multiple(rng, n).collect();
                for inner in 0..config.k_inner_iters {
                    if step >= config.max_steps {
                        break 'outer;
                    }
                    let batch = if self.phi.is_some() {
                        let size = config.task_batch_size.min(task.split(Split::Train).len());
                        let batch = sample_batch(task, Split::Train, size, self.class_cap, rng)?;
                        if batch.is_empty() {
                            return Err(Error::InvalidInput(format!(
                                "task {} has an empty training split",
                                task.task_id
                            )));
                        }
                        batch
                    } else {
                        Vec::new()
                    };
                    let loss =
                        self.loss_and_grad(&batch, meta.as_deref(), &minibatch, &mut grads)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite {
                            index: step,
                            context: "dvn training loss at step".into(),
                        });
                    }
                    let mut params: Vec<&mut [f64]> = Vec::new();
                    if let Some(phi) = self.phi.as_mut() {
                        params.extend(phi.params_mut());
                    }
                    params.extend(self.rho.params_mut());
                    opt.step(&mut params, &grads.slices())?;

                    log.steps.push(StepRecord {
                        step,
                        round,
                        task: task.task_id.clone(),
                        outer,
                        inner,
                        loss,
                    });
                    step += 1;
                    if converged(&log.steps, config) {
                        log.stopped_early = true;
                        break 'outer;
                    }
                }
            }
            round += 1;
        }
        Ok(log)
    }

    pub fn to_json(&self, train_config: Option<&DvnTrainConfig>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            mode: self.mode,
            fp: self.fingerprint.clone(),
            encoding_len: self.encoding_len,
            row_dim: self.row_dim,
            class_cap: self.class_cap,
            phi: self.phi.clone(),
            rho: self.rho.clone(),
            train_config: train_config.cloned(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<(Self, Option<DvnTrainConfig>)> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        c.rho.validate()?;
        if let Some(phi) = &c.phi {
            phi.validate()?;
        }
        let mut rho_in = c.encoding_len;
        if c.mode.uses_learned() {
            match &c.phi {
                Some(phi) if phi.in_dim() == c.row_dim && phi.out_dim() == PHI_HIDDEN[1] => {}
                _ => {
                    return Err(Error::InvalidInput(
                        "checkpoint phi tower is malformed".into(),
                    ))
                }
            }
            rho_in += PHI_HIDDEN[1];
        } else if c.phi.is_some() {
            return Err(Error::InvalidInput("unexpected phi tower for mode".into()));
        }
        if c.mode.uses_precomputed() {
            rho_in += META_FEATURE_DIM;
        }
        if c.rho.in_dim() != rho_in || c.rho.out_dim() != 1 {
            return Err(Error::InvalidInput(
                "checkpoint rho tower is malformed".into(),
            ));
        }
        Ok((
            Self {
                mode: c.mode,
                fingerprint: c.fp,
                encoding_len: c.encoding_len,
                row_dim: c.row_dim,
                class_cap: c.class_cap,
                phi: c.phi,
                rho: c.rho,
            },
            c.train_config,
        ))
    }

    pub fn save(&self, path: &Path, train_config: Option<&DvnTrainConfig>) -> Result<()> {
        write_atomic(path, self.to_json(train_config)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<DvnTrainConfig>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn converged(steps: &[StepRecord], config: &DvnTrainConfig) -> bool {
    let w = config.convergence_window;
    let n = steps.len();
    if n < 2 * w || n % w != 0 {
        return false;
    }
    let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    let prev = mean(&steps[n - 2 * w..n - w]);
    let cur = mean(&steps[n - w..]);
    prev - cur < config.convergence_tol
}
