//! Lifelong database of child-model training experiments.
//!
//! On disk the database is newline-delimited JSON: a header object carrying
//! the format version and search-space fingerprint, then one record per line.
//! Records are only ever appended.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::child::{train_and_score, ChildTrainConfig};
use crate::encoding::{ArchitectureEncoding, SearchSpaceSpec};
use crate::task::TaskDataset;
use crate::{seeding, Error, Result};

pub const DB_FORMAT: &str = "archinfer-experiments";
pub const DB_VERSION: u32 = 1;

/// Spread below which a task's performances are considered constant.
pub const DEGENERATE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    fp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub task_id: String,
    /// Flattened encoding.
    pub u: Vec<f64>,
    /// Validation accuracy; 0 for failed trainings.
    pub v: f64,
    pub seed: u64,
    pub ts: u64,
    pub ok: bool,
    pub fp: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

/// One DVN training example: a record's encoding and its normalized target.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub record_id: usize,
    pub u: Vec<f64>,
    pub raw: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentDb {
    fp: String,
    records: Vec<ExperimentRecord>,
}

impl ExperimentDb {
    pub fn new(space: &SearchSpaceSpec) -> Self {
        Self {
            fp: space.fingerprint(),
            records: Vec::new(),
        }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fp
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ExperimentRecord] {
        &self.records
    }

    pub fn append(&mut self, record: ExperimentRecord) -> Result<usize> {
        if record.fp != self.fp {
            return Err(Error::FingerprintMismatch {
                expected: self.fp.clone(),
                found: record.fp,
            });
        }
        if !(0.0..=1.0).contains(&record.v) {
            return Err(Error::InvalidInput(format!(
                "performance {} outside [0, 1]",
                record.v
            )));
        }
        self.records.push(record);
        Ok(self.records.len() - 1)
    }

    /// Task ids in order of first appearance.
    pub fn task_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.task_id.as_str()))
            .map(|r| r.task_id.clone())
            .collect()
    }

    /// Successful records of a task with their record ids.
    pub fn task_records<'a>(
        &'a self,
        task_id: &'a str,
    ) -> impl Iterator<Item = (usize, &'a ExperimentRecord)> + 'a {
        self.records
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.ok && r.task_id == task_id)
    }

    pub fn task_stats(&self, task_id: &str) -> Result<TaskStats> {
        let vs: Vec<f64> = self.task_records(task_id).map(|(_, r)| r.v).collect();
        if vs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no records for task {task_id}"
            )));
        }
        let n = vs.len() as f64;
        let mean = vs.iter().sum::<f64>() / n;
        let var = vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(TaskStats {
            mean,
            std: var.sqrt(),
            count: vs.len(),
        })
    }

    /// `(v - mu_k) / sigma_k` per record of the task.
    pub fn normalized_targets(&self, task_id: &str) -> Result<Vec<Triplet>> {
        let stats = self.task_stats(task_id)?;
        if stats.count < 2 || stats.std <= DEGENERATE_EPS {
            return Err(Error::DegenerateTask(task_id.to_string()));
        }
        Ok(self
            .task_records(task_id)
            .map(|(id, r)| Triplet {
                record_id: id,
                u: r.u.clone(),
                raw: r.v,
                target: (r.v - stats.mean) / stats.std,
            })
            .collect())
    }

    fn contains(&self, task_id: &str, seed: u64) -> bool {
        self.records
            .iter()
            .any(|r| r.task_id == task_id && r.seed == seed)
    }

    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Header {
            format: DB_FORMAT.into(),
            version: DB_VERSION,
            fp: self.fp.clone(),
        })?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, l)) => serde_json::from_str(l).map_err(|e| Error::Parse {
                line: 1,
                message: format!("bad header: {e}"),
            })?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header".into(),
                })
            }
        };
        if header.format != DB_FORMAT || header.version != DB_VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported format {} v{}", header.format, header.version),
            });
        }
        let mut db = Self {
            fp: header.fp,
            records: Vec::new(),
        };
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExperimentRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            db.append(rec).map_err(|e| match e {
                Error::FingerprintMismatch { .. } => e,
                other => Error::Parse {
                    line: i + 1,
                    message: other.to_string(),
                },
            })?;
        }
        Ok(db)
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_ndjson()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ndjson(&text)
    }

    /// Loads and checks the database belongs to `space`.
    pub fn load_for(path: &Path, space: &SearchSpaceSpec) -> Result<Self> {
        let db = Self::load(path)?;
        let expected = space.fingerprint();
        if db.fp != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: db.fp,
            });
        }
        Ok(db)
    }
}

/// Writes `bytes` to `path` through a temp file + rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Options for [`populate`].
#[derive(Debug, Clone)]
pub struct PopulateOptions {
    pub m_per_task: usize,
    pub seed: u64,
    /// Value written to each record's `ts` field.
    pub timestamp: u64,
    /// Worker threads; results are identical for any value.
    pub jobs: usize,
}

/// Seed of the `index`-th experiment on a task.
pub fn experiment_seed(base: u64, task_id: &str, index: usize) -> u64 {
    seeding::derive(base, &[seeding::tag(task_id), index as u64])
}

fn run_experiment(
    task: &TaskDataset,
    space: &SearchSpaceSpec,
    config: &ChildTrainConfig,
    seed: u64,
) -> (Vec<f64>, Result<f64>) {
    let mut rng = seeding::rng(seed);
    let enc = ArchitectureEncoding::random_one_hot(space, &mut rng);
    let v = train_and_score(&enc, space, task, config, &mut rng);
    (enc.flatten(), v)
}

/// Trains `m_per_task` random one-hot architectures per task and appends the
/// results. Experiments whose seed is already recorded for the task are
/// skipped, so an interrupted run can be resumed. Returns the number of
/// records appended.
pub fn populate(
    db: &mut ExperimentDb,
    tasks: &[TaskDataset],
    space: &SearchSpaceSpec,
    config: &ChildTrainConfig,
    opts: &PopulateOptions,
) -> Result<usize> {
    if opts.m_per_task < 2 {
        return Err(Error::InvalidInput("m_per_task must be >= 2".into()));
    }
    if db.fp != space.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: space.fingerprint(),
            found: db.fp.clone(),
        });
    }
    config.validate()?;
    let pending: Vec<(usize, u64)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(t, task)| {
            (0..opts.m_per_task).map(move |i| (t, experiment_seed(opts.seed, &task.task_id, i)))
        })
        .filter(|&(t, seed)| !db.contains(&tasks[t].task_id, seed))
        .collect();

    let jobs = opts.jobs.max(1).min(pending.len().max(1));
    let results: Vec<(Vec<f64>, Result<f64>)> = if jobs == 1 {
        pending
            .iter()
            .enumerate()
            .map(|(k, &(t, seed))| {
                if (k + 1) % 10 == 0 {
                    info!("populate: {}/{} experiments", k + 1, pending.len());
                }
                run_experiment(&tasks[t], space, config, seed)
            })
            .collect()
    } else {
        let chunk = pending.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = pending
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|&(t, seed)| run_experiment(&tasks[t], space, config, seed))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("populate worker panicked"))
                .collect()
        })
    };

    let mut appended = 0;
    for (&(t, seed), (u, v)) in pending.iter().zip(results) {
        let (v, ok) = match v {
            Ok(v) => (v, true),
            Err(e) => {
                warn!(
                    "task {} seed {seed}: training failed: {e}",
                    tasks[t].task_id
                );
                (0.0, false)
            }
        };
        db.append(ExperimentRecord {
            task_id: tasks[t].task_id.clone(),
            u,
            v,
            seed,
            ts: opts.timestamp,
            ok,
            fp: db.fp.clone(),
        })?;
        appended += 1;
        if appended % 10 == 0 {
            info!("populate: {appended} records appended");
        }
    }
    Ok(appended)
}
