use log::info;
use serde::{Deserialize, Serialize};

use super::metrics::{mean_std, median};
use crate::child::{train_child, ChildTrainConfig};
use crate::dvn::DvnModel;
use crate::encoding::{ArchitectureEncoding, SearchSpaceSpec};
use crate::inference::{infer_architecture, InferenceConfig};
use crate::par::par_map;
use crate::seeding;
use crate::task::{Split, TaskDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchEvalConfig {
    pub inference: InferenceConfig,
    pub child: ChildTrainConfig,
    pub baseline_samples: usize,
    pub repeats: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for SearchEvalConfig {
    fn default() -> Self {
        Self {
            inference: InferenceConfig::default(),
            child: ChildTrainConfig::default(),
            baseline_samples: 10,
            repeats: 3,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Proposed,
    Random,
}

/// One trained child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub task_id: String,
    pub arm: Arm,
    /// Repeat index for the proposed arm, sample index for the random arm.
    pub index: usize,
    pub predicted: Option<f64>,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub task_id: String,
    pub proposed_val_mean: f64,
    pub proposed_val_std: f64,
    pub proposed_test_mean: f64,
    pub proposed_test_std: f64,
    pub random_val_mean: Option<f64>,
    pub random_val_std: Option<f64>,
    pub random_val_median: Option<f64>,
    pub random_test_mean: Option<f64>,
    pub random_test_std: Option<f64>,
}

impl SearchSummary {
    /// Proposed mean validation accuracy at least the random-arm median.
    pub fn beats_random_median(&self) -> Option<bool> {
        self.random_val_median.map(|m| self.proposed_val_mean >= m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub rows: Vec<SearchRow>,
    pub summary: Vec<SearchSummary>,
}

/// Compares children trained at the inferred encoding with children trained
/// at random one-hot encodings.
///
/// `models` pairs each evaluated task with the DVN that must not have seen it.
/// The proposed child is trained at the continuous inferred encoding.
pub fn search_quality_eval(
    tasks: &[TaskDataset],
    models: &[(String, &DvnModel)],
    space: &SearchSpaceSpec,
    config: &SearchEvalConfig,
) -> Result<SearchReport> {
    if config.repeats == 0 {
        return Err(Error::InvalidInput("need at least one repeat".into()));
    }
    let mut cells = Vec::new();
    for (mi, (task_id, _)) in models.iter().enumerate() {
        let ti = tasks
            .iter()
            .position(|t| &t.task_id == task_id)
            .ok_or_else(|| Error::InvalidInput(format!("no dataset for task {task_id}")))?;
        for r in 0..config.repeats {
            cells.push((mi, ti, Arm::Proposed, r));
        }
        for s in 0..config.baseline_samples {
            cells.push((mi, ti, Arm::Random, s));
        }
    }
    let rows = par_map(cells.len(), config.jobs, |c| -> Result<SearchRow> {
        let (mi, ti, arm, index) = cells[c];
        let task = &tasks[ti];
        let tag = |name: &str| {
            seeding::derive(
                config.seed,
                &[
                    seeding::tag(&task.task_id),
                    seeding::tag(name),
                    index as u64,
                ],
            )
        };
        let (enc, predicted) = match arm {
            Arm::Proposed => {
                let mut rng = seeding::rng(tag("infer"));
                let res =
                    infer_architecture(models[mi].1, task, space, &config.inference, &mut rng)?;
                (res.best_encoding(space)?, Some(res.best_value))
            }
            Arm::Random => {
                let mut rng = seeding::rng(tag("random-arch"));
                (ArchitectureEncoding::random_one_hot(space, &mut rng), None)
            }
        };
        let mut rng = seeding::rng(tag(match arm {
            Arm::Proposed => "proposed-child",
            Arm::Random => "random-child",
        }));
        let child = train_child(&enc, space, task, &config.child, &mut rng)?;
        Ok(SearchRow {
            task_id: task.task_id.clone(),
            arm,
            index,
            predicted,
            validation_accuracy: child.accuracy(task, Split::Validation)?,
            test_accuracy: child.accuracy(task, Split::Test)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let summary = models
        .iter()
        .map(|(task_id, _)| {
            let pick = |arm: Arm, f: fn(&SearchRow) -> f64| -> Vec<f64> {
                rows.iter()
                    .filter(|r| &r.task_id == task_id && r.arm == arm)
                    .map(f)
                    .collect()
            };
            let (pv, pvs) = mean_std(&pick(Arm::Proposed, |r| r.validation_accuracy));
            let (pt, pts) = mean_std(&pick(Arm::Proposed, |r| r.test_accuracy));
            let rv = pick(Arm::Random, |r| r.validation_accuracy);
            let rt = pick(Arm::Random, |r| r.test_accuracy);
            let some = |x: f64| (!rv.is_empty()).then_some(x);
            let (rvm, rvs) = mean_std(&rv);
            let (rtm, rts) = mean_std(&rt);
            let s = SearchSummary {
                task_id: task_id.clone(),
                proposed_val_mean: pv,
                proposed_val_std: pvs,
                proposed_test_mean: pt,
                proposed_test_std: pts,
                random_val_mean: some(rvm),
                random_val_std: some(rvs),
                random_val_median: (!rv.is_empty()).then(|| median(&rv)),
                random_test_mean: some(rtm),
                random_test_std: some(rts),
            };
            info!(
                "search quality {task_id}: proposed {:.3}, random median {:?}",
                s.proposed_val_mean, s.random_val_median
            );
            s
        })
        .collect();
    Ok(SearchReport { rows, summary })
}
