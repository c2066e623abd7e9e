use std::collections::BTreeSet;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::metrics::{mean_std, r2, spearman};
use crate::db::ExperimentDb;
use crate::dvn::{DvnModel, DvnTrainConfig, MetaMode};
use crate::encoding::SearchSpaceSpec;
use crate::par::par_map;
use crate::seeding;
use crate::task::TaskDataset;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LooConfig {
    pub modes: Vec<MetaMode>,
    pub repeats: usize,
    pub dvn: DvnTrainConfig,
    pub seed: u64,
    pub jobs: usize,
    pub feature_dim: usize,
    pub class_cap: usize,
}

impl Default for LooConfig {
    fn default() -> Self {
        Self {
            modes: vec![MetaMode::NoMeta, MetaMode::LearnedMeta],
            repeats: 3,
            dvn: DvnTrainConfig::default(),
            seed: 0,
            jobs: 1,
            feature_dim: crate::task::DEFAULT_FEATURE_DIM,
            class_cap: crate::task::DEFAULT_CLASS_CAP,
        }
    }
}

/// One held-out evaluation: task x mode x repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub task_id: String,
    pub mode: MetaMode,
    pub repeat: usize,
    pub spearman: f64,
    pub r2: f64,
    pub num_records: usize,
    pub train_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooSummary {
    pub task_id: String,
    pub mode: MetaMode,
    pub spearman_mean: f64,
    pub spearman_std: f64,
    pub r2_mean: f64,
    pub r2_std: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<LooRow>,
    pub summary: Vec<LooSummary>,
    pub skipped_tasks: Vec<String>,
    pub repeats: usize,
}

impl EvaluationReport {
    pub fn summary_for(&self, task_id: &str, mode: MetaMode) -> Option<&LooSummary> {
        self.summary
            .iter()
            .find(|s| s.task_id == task_id && s.mode == mode)
    }
}

/// A DVN trained with one task held out.
#[derive(Debug, Clone)]
pub struct FoldModel {
    pub held_out: String,
    pub mode: MetaMode,
    pub repeat: usize,
    pub dvn: DvnModel,
}

#[derive(Debug, Clone)]
pub struct LooOutcome {
    pub report: EvaluationReport,
    pub folds: Vec<FoldModel>,
}

/// Seed of the DVN trained without `held_out`.
pub fn fold_seed(base: u64, held_out: &str, mode: MetaMode, repeat: usize) -> u64 {
    seeding::derive(
        base,
        &[
            seeding::tag(held_out),
            seeding::tag(mode.name()),
            repeat as u64,
        ],
    )
}

#[derive(Debug)]
pub(crate) struct HeldOutScore {
    pub spearman: f64,
    pub r2: f64,
    pub num_records: usize,
}

/// Trains a fresh DVN on `train` and scores it on `held_out`'s records.
pub(crate) fn train_and_score_fold(
    db: &ExperimentDb,
    train: &[&TaskDataset],
    held_out: &TaskDataset,
    space: &SearchSpaceSpec,
    mode: MetaMode,
    config: &LooConfig,
    seed: u64,
) -> Result<(DvnModel, HeldOutScore, usize)> {
    let mut rng = seeding::rng(seed);
    let mut dvn = DvnModel::new(mode, space, config.feature_dim, config.class_cap, &mut rng)?;
    let log = dvn.train(db, train, &config.dvn, &mut rng)?;

    let targets = db.normalized_targets(&held_out.task_id)?;
    let held_ids: BTreeSet<usize> = targets.iter().map(|t| t.record_id).collect();
    if let Some(id) = log.record_ids.intersection(&held_ids).next() {
        return Err(Error::InvalidState(format!(
            "record {id} of held-out task {} leaked into training",
            held_out.task_id
        )));
    }

    let ctx = dvn.context_for(held_out)?;
    let pred = targets
        .iter()
        .map(|t| dvn.predict(&t.u, &ctx))
        .collect::<Result<Vec<f64>>>()?;
    let raw: Vec<f64> = targets.iter().map(|t| t.raw).collect();
    let norm: Vec<f64> = targets.iter().map(|t| t.target).collect();
    let rho = match spearman(&pred, &raw) {
        Ok(r) => r,
        Err(Error::UndefinedMetric(m)) => {
            // constant predictions carry no ranking information
            warn!("task {}: {m}; scoring spearman as 0", held_out.task_id);
            0.0
        }
        Err(e) => return Err(e),
    };
    let score = HeldOutScore {
        spearman: rho,
        r2: r2(&pred, &norm)?,
        num_records: targets.len(),
    };
    Ok((dvn, score, log.steps.len()))
}

/// Leave-one-task-out evaluation of the value network for each mode.
///
/// Every (held-out task, mode, repeat) trains a fresh DVN on all other
/// tasks' records with its own seed, predicts the held-out task's recorded
/// encodings and scores them: Spearman against raw performance, R2 against
/// normalized targets. Held-out tasks with degenerate records are skipped.
pub fn leave_one_out(
    tasks: &[TaskDataset],
    db: &ExperimentDb,
    space: &SearchSpaceSpec,
    config: &LooConfig,
) -> Result<LooOutcome> {
    if tasks.len() < 2 {
        return Err(Error::InvalidInput(
            "leave-one-out needs at least two tasks".into(),
        ));
    }
    if config.repeats == 0 || config.modes.is_empty() {
        return Err(Error::InvalidInput(
            "need at least one repeat and mode".into(),
        ));
    }
    let mut skipped = Vec::new();
    let mut held: Vec<usize> = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        match db.normalized_targets(&t.task_id) {
            Ok(_) => held.push(i),
            Err(Error::DegenerateTask(m)) | Err(Error::InvalidInput(m)) => {
                warn!("skipping held-out task {}: {m}", t.task_id);
                skipped.push(t.task_id.clone());
            }
            Err(e) => return Err(e),
        }
    }

    let mut jobs_list = Vec::new();
    for &h in &held {
        for &mode in &config.modes {
            for r in 0..config.repeats {
                jobs_list.push((h, mode, r));
            }
        }
    }
    let results = par_map(jobs_list.len(), config.jobs, |j| {
        let (h, mode, r) = jobs_list[j];
        let train: Vec<&TaskDataset> = tasks
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != h)
            .map(|(_, t)| t)
            .collect();
        let seed = fold_seed(config.seed, &tasks[h].task_id, mode, r);
        let out = train_and_score_fold(db, &train, &tasks[h], space, mode, config, seed);
        if let Ok((_, s, _)) = &out {
            info!(
                "held out {} [{} #{r}]: spearman {:.3}, r2 {:.3}",
                tasks[h].task_id,
                mode.name(),
                s.spearman,
                s.r2
            );
        }
        out
    });

    let mut rows = Vec::new();
    let mut folds = Vec::new();
    for (&(h, mode, repeat), res) in jobs_list.iter().zip(results) {
        let (dvn, score, steps) = res?;
        let task_id = tasks[h].task_id.clone();
        rows.push(LooRow {
            task_id: task_id.clone(),
            mode,
            repeat,
            spearman: score.spearman,
            r2: score.r2,
            num_records: score.num_records,
            train_steps: steps,
        });
        folds.push(FoldModel {
            held_out: task_id,
            mode,
            repeat,
            dvn,
        });
    }
    let summary = summarize(&rows);
    Ok(LooOutcome {
        report: EvaluationReport {
            rows,
            summary,
            skipped_tasks: skipped,
            repeats: config.repeats,
        },
        folds,
    })
}

/// Mean and population std per (task, mode), in first-appearance order.
pub fn summarize(rows: &[LooRow]) -> Vec<LooSummary> {
    let mut keys: Vec<(String, MetaMode)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(t, m)| *t == r.task_id && *m == r.mode) {
            keys.push((r.task_id.clone(), r.mode));
        }
    }
    keys.into_iter()
        .map(|(task_id, mode)| {
            let sel: Vec<&LooRow> = rows
                .iter()
                .filter(|r| r.task_id == task_id && r.mode == mode)
                .collect();
            let (sm, ss) = mean_std(&sel.iter().map(|r| r.spearman).collect::<Vec<_>>());
            let (rm, rs) = mean_std(&sel.iter().map(|r| r.r2).collect::<Vec<_>>());
            LooSummary {
                task_id,
                mode,
                spearman_mean: sm,
                spearman_std: ss,
                r2_mean: rm,
                r2_std: rs,
                repeats: sel.len(),
            }
        })
        .collect()
}
