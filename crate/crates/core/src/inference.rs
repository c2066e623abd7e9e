//! Multi-restart gradient ascent on a trained value network.

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::child::training_steps_on_this_thread;
use crate::dvn::{DvnModel, TaskContext, U_SCALE};
use crate::encoding::{ArchitectureEncoding, DiscreteArchitecture, SearchSpaceSpec};
use crate::par::par_map;
use crate::seeding::{self, gaussian};
use crate::task::TaskDataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Random one-hot encoding plus Gaussian jitter.
    RandomOneHotJitter,
    /// Every coordinate drawn from N(0, 1).
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub num_starting_points: usize,
    pub max_iters: usize,
    pub step_size: f64,
    pub grad_tolerance: f64,
    pub init: InitStrategy,
    pub jitter_sigma: f64,
    /// Worker threads for restarts; results do not depend on it.
    pub jobs: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            num_starting_points: 10,
            max_iters: 1000,
            step_size: 0.05,
            grad_tolerance: 1e-6,
            init: InitStrategy::RandomOneHotJitter,
            jitter_sigma: 0.5,
            jobs: 1,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_starting_points == 0 || self.max_iters == 0 {
            return Err(Error::InvalidInput(
                "need at least one starting point and one iteration".into(),
            ));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "bad step size {}",
                self.step_size
            )));
        }
        if !(self.grad_tolerance > 0.0) || !(self.jitter_sigma >= 0.0) {
            return Err(Error::InvalidInput(
                "gradient tolerance must be positive and jitter non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Something that can be climbed: a value and its gradient in `u`.
pub trait ValueSurface: Sync {
    fn value_and_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, u: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(u)?.0)
    }

    /// Multiplier on the step size. A surface that scales `u` by `s` before
    /// use returns `1 / s^2`, so a step moves its internal input by
    /// `step_size * grad` there.
    fn step_scale(&self) -> f64 {
        1.0
    }
}

/// A value network with its task inputs fixed.
pub struct ConditionedDvn<'a> {
    pub dvn: &'a DvnModel,
    pub context: &'a TaskContext,
}

impl ValueSurface for ConditionedDvn<'_> {
    fn value_and_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.dvn.value_and_grad(u, self.context)
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        self.dvn.predict(u, self.context)
    }

    fn step_scale(&self) -> f64 {
        1.0 / (U_SCALE * U_SCALE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ascent {
    pub u: Vec<f64>,
    pub initial_value: f64,
    pub final_value: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// Plain gradient ascent `u <- u + step * grad` from `u0`, with
/// `step = config.step_size * surface.step_scale()`.
///
/// Iteration `t` evaluates the gradient at the current iterate and stops if
/// its infinity norm is below tolerance, so a start at a critical point
/// reports one iteration. A non-finite value, gradient or iterate aborts
/// with `Error::NonFinite` carrying the iteration number.
pub fn gradient_ascent<S: ValueSurface + ?Sized>(
    surface: &S,
    u0: &[f64],
    config: &InferenceConfig,
) -> Result<Ascent> {
    let mut u = u0.to_vec();
    let nonfinite = |index: usize| Error::NonFinite {
        index,
        context: "gradient ascent iteration".into(),
    };
    let (initial_value, _) = surface.value_and_grad(&u)?;
    if !initial_value.is_finite() {
        return Err(nonfinite(0));
    }
    let step = config.step_size * surface.step_scale();
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;
    for t in 1..=config.max_iters {
        iterations = t;
        let (_, grad) = surface.value_and_grad(&u)?;
        let norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if !norm.is_finite() {
            return Err(nonfinite(t));
        }
        if norm < config.grad_tolerance {
            termination = Termination::Converged;
            break;
        }
        for (x, g) in u.iter_mut().zip(&grad) {
            *x += step * g;
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(nonfinite(t));
        }
    }
    let final_value = surface.value(&u)?;
    if !final_value.is_finite() {
        return Err(nonfinite(iterations));
    }
    Ok(Ascent {
        u,
        initial_value,
        final_value,
        iterations,
        termination,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub index: usize,
    pub initial_value: f64,
    /// `None` when the restart failed.
    pub final_value: Option<f64>,
    pub iterations: usize,
    /// `converged`, `max_iters` or a failure diagnostic.
    pub termination: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub task_id: String,
    pub best_u: Vec<f64>,
    pub best_value: f64,
    pub best_restart: usize,
    pub architecture: DiscreteArchitecture,
    pub restarts: Vec<RestartRecord>,
    /// Child optimisation steps taken during inference, on the calling
    /// thread and every restart worker.
    pub child_training_steps: u64,
}

impl InferenceResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn best_encoding(&self, space: &SearchSpaceSpec) -> Result<ArchitectureEncoding> {
        ArchitectureEncoding::unflatten(space, &self.best_u)
    }
}

/// Starting point for restart `index` under `base_seed`.
pub fn initial_point(
    space: &SearchSpaceSpec,
    config: &InferenceConfig,
    base_seed: u64,
    index: usize,
) -> Vec<f64> {
    let mut rng = seeding::rng(seeding::derive(base_seed, &[index as u64]));
    match config.init {
        InitStrategy::RandomOneHotJitter => {
            let mut u = ArchitectureEncoding::random_one_hot(space, &mut rng).flatten();
            for x in &mut u {
                *x += config.jitter_sigma * gaussian(&mut rng);
            }
            u
        }
        InitStrategy::Gaussian => (0..space.encoding_len())
            .map(|_| gaussian(&mut rng))
            .collect(),
    }
}

/// Runs every restart on `surface` and keeps the best finite result.
pub fn multi_start_ascent<S: ValueSurface + ?Sized, R: Rng + ?Sized>(
    surface: &S,
    space: &SearchSpaceSpec,
    config: &InferenceConfig,
    rng: &mut R,
) -> Result<(usize, Vec<RestartRecord>)> {
    let (best, records, _) = counted_restarts(surface, space, config, rng)?;
    Ok((best, records))
}

/// As [`multi_start_ascent`], also returning the child training steps each
/// worker took while running its restarts.
fn counted_restarts<S: ValueSurface + ?Sized, R: Rng + ?Sized>(
    surface: &S,
    space: &SearchSpaceSpec,
    config: &InferenceConfig,
    rng: &mut R,
) -> Result<(usize, Vec<RestartRecord>, u64)> {
    config.validate()?;
    let base_seed: u64 = rng.random();
    let run = |i: usize| -> (RestartRecord, u64) {
        let before = training_steps_on_this_thread();
        let record = restart(surface, space, config, base_seed, i);
        (record, training_steps_on_this_thread() - before)
    };
    let (records, steps): (Vec<_>, Vec<_>) = par_map(config.num_starting_points, config.jobs, run)
        .into_iter()
        .unzip();
    let mut best: Option<(usize, f64)> = None;
    for r in &records {
        if let Some(v) = r.final_value {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((r.index, v));
            }
        }
    }
    let (best, _) = best.ok_or_else(|| Error::Inference("every restart failed".into()))?;
    Ok((best, records, steps.iter().sum()))
}

fn restart<S: ValueSurface + ?Sized>(
    surface: &S,
    space: &SearchSpaceSpec,
    config: &InferenceConfig,
    base_seed: u64,
    i: usize,
) -> RestartRecord {
    let u0 = initial_point(space, config, base_seed, i);
    let initial_value = surface.value(&u0).unwrap_or(f64::NAN);
    match gradient_ascent(surface, &u0, config) {
        Ok(a) => RestartRecord {
            index: i,
            initial_value: a.initial_value,
            final_value: Some(a.final_value),
            iterations: a.iterations,
            termination: match a.termination {
                Termination::Converged => "converged".into(),
                Termination::MaxIters => "max_iters".into(),
            },
            u: Some(a.u),
        },
        Err(e) => {
            warn!("restart {i} failed: {e}");
            RestartRecord {
                index: i,
                initial_value,
                final_value: None,
                iterations: match e {
                    Error::NonFinite { index, .. } => index,
                    _ => 0,
                },
                termination: format!("failed: {e}"),
                u: None,
            }
        }
    }
}

/// Infers an architecture for `dataset` without training any child model.
pub fn infer_architecture<R: Rng + ?Sized>(
    dvn: &DvnModel,
    dataset: &TaskDataset,
    space: &SearchSpaceSpec,
    config: &InferenceConfig,
    rng: &mut R,
) -> Result<InferenceResult> {
    let context = dvn.context_for(dataset)?;
    infer_with_context(dvn, &context, &dataset.task_id, space, config, rng)
}

/// As [`infer_architecture`] with precomputed task inputs.
pub fn infer_with_context<R: Rng + ?Sized>(
    dvn: &DvnModel,
    context: &TaskContext,
    task_id: &str,
    space: &SearchSpaceSpec,
    config: &InferenceConfig,
    rng: &mut R,
) -> Result<InferenceResult> {
    let fp = space.fingerprint();
    if dvn.fingerprint() != fp {
        return Err(Error::FingerprintMismatch {
            expected: fp,
            found: dvn.fingerprint().to_string(),
        });
    }
    let start = training_steps_on_this_thread();
    let surface = ConditionedDvn { dvn, context };
    let before_restarts = training_steps_on_this_thread();
    let (best, restarts, restart_steps) = counted_restarts(&surface, space, config, rng)?;
    // With one job the restarts ran here and are already in restart_steps.
    let on_caller_during = training_steps_on_this_thread() - before_restarts;
    let best_u = restarts[best]
        .u
        .clone()
        .expect("best restart has an iterate");
    let best_value = restarts[best]
        .final_value
        .expect("best restart has a value");
    let architecture = ArchitectureEncoding::unflatten(space, &best_u)?.discretize(space);
    debug!("task {task_id}: best restart {best}, value {best_value:.4}");
    Ok(InferenceResult {
        task_id: task_id.to_string(),
        best_u,
        best_value,
        best_restart: best,
        architecture,
        restarts,
        child_training_steps: training_steps_on_this_thread() - start - on_caller_during
            + restart_steps,
    })
}
