use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loo::{fold_seed, train_and_score_fold, LooConfig};
use super::metrics::mean_std;
use crate::db::ExperimentDb;
use crate::dvn::{DvnModel, MetaMode};
use crate::encoding::SearchSpaceSpec;
use crate::par::par_map;
use crate::seeding;
use crate::task::{sample_batch, Split, TaskDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AddingTasksConfig {
    pub orderings: usize,
    pub trainings: usize,
    pub mode: MetaMode,
    /// DVN schedule, seed, jobs and input sizes; its `modes` and `repeats`
    /// are ignored.
    pub base: LooConfig,
}

impl Default for AddingTasksConfig {
    fn default() -> Self {
        Self {
            orderings: 5,
            trainings: 2,
            mode: MetaMode::LearnedMeta,
            base: LooConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub ordering: usize,
    pub num_tasks: usize,
    pub training: usize,
    pub spearman: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub num_tasks: usize,
    pub spearman_mean: f64,
    pub spearman_std: f64,
    pub r2_mean: f64,
    pub r2_std: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddingTasksReport {
    pub test_task: String,
    pub rows: Vec<CurveRow>,
    pub curve: Vec<CurvePoint>,
}

/// Held-out quality of the DVN on `test_task` as training tasks are added.
///
/// For every ordering of the remaining usable tasks and every k in 1..K-1,
/// DVNs are trained on the first k tasks. With all K-1 tasks the training set
/// no longer depends on the ordering, so that point reuses the leave-one-out
/// seeds and task order and is computed once per training.
pub fn adding_tasks_study(
    tasks: &[TaskDataset],
    test_task: &str,
    db: &ExperimentDb,
    space: &SearchSpaceSpec,
    config: &AddingTasksConfig,
) -> Result<AddingTasksReport> {
    let test = tasks
        .iter()
        .find(|t| t.task_id == test_task)
        .ok_or_else(|| Error::InvalidInput(format!("unknown test task {test_task}")))?;
    let mut pool: Vec<&TaskDataset> = Vec::new();
    for t in tasks.iter().filter(|t| t.task_id != test_task) {
        match db.normalized_targets(&t.task_id) {
            Ok(_) => pool.push(t),
            Err(Error::DegenerateTask(_)) | Err(Error::InvalidInput(_)) => {
                warn!("adding-tasks study: skipping unusable task {}", t.task_id)
            }
            Err(e) => return Err(e),
        }
    }
    let k_max = pool.len();
    if k_max < 3 {
        return Err(Error::InvalidInput(
            "adding-tasks study needs at least three training tasks".into(),
        ));
    }
    if config.orderings == 0 || config.trainings == 0 {
        return Err(Error::InvalidInput(
            "need at least one ordering and training".into(),
        ));
    }
    let base_seed = config.base.seed;
    let orders: Vec<Vec<&TaskDataset>> = (0..config.orderings)
        .map(|o| {
            let mut rng = seeding::rng_for(base_seed, &[seeding::tag("ordering"), o as u64]);
            let mut p = pool.clone();
            p.shuffle(&mut rng);
            p
        })
        .collect();

    // (ordering, k, training); the full set only for ordering 0
    let mut cells = Vec::new();
    for o in 0..config.orderings {
        for k in 1..k_max {
            for t in 0..config.trainings {
                cells.push((o, k, t));
            }
        }
    }
    for t in 0..config.trainings {
        cells.push((0, k_max, t));
    }
    let scores = par_map(cells.len(), config.base.jobs, |c| {
        let (o, k, t) = cells[c];
        let (train, seed) = if k == k_max {
            (
                pool.clone(),
                fold_seed(base_seed, test_task, config.mode, t),
            )
        } else {
            let seed = seeding::derive(
                base_seed,
                &[
                    seeding::tag("adding-tasks"),
                    seeding::tag(test_task),
                    o as u64,
                    k as u64,
                    t as u64,
                ],
            );
            (orders[o][..k].to_vec(), seed)
        };
        train_and_score_fold(db, &train, test, space, config.mode, &config.base, seed)
            .map(|(_, s, _)| s)
    });

    let mut rows = Vec::new();
    for (&(o, k, t), s) in cells.iter().zip(scores) {
        let s = s?;
        let orderings: Vec<usize> = if k == k_max {
            (0..config.orderings).collect()
        } else {
            vec![o]
        };
        for ordering in orderings {
            rows.push(CurveRow {
                ordering,
                num_tasks: k,
                training: t,
                spearman: s.spearman,
                r2: s.r2,
            });
        }
    }
    rows.sort_by_key(|r| (r.num_tasks, r.ordering, r.training));
    let curve = (1..=k_max)
        .map(|k| {
            let sel: Vec<&CurveRow> = rows.iter().filter(|r| r.num_tasks == k).collect();
            let (sm, ss) = mean_std(&sel.iter().map(|r| r.spearman).collect::<Vec<_>>());
            let (rm, rs) = mean_std(&sel.iter().map(|r| r.r2).collect::<Vec<_>>());
            info!("adding tasks: k={k} spearman {sm:.3}");
            CurvePoint {
                num_tasks: k,
                spearman_mean: sm,
                spearman_std: ss,
                r2_mean: rm,
                r2_std: rs,
                samples: sel.len(),
            }
        })
        .collect();
    Ok(AddingTasksReport {
        test_task: test_task.to_string(),
        rows,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal axes, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variances along each axis (population normalisation).
    pub variances: Vec<f64>,
    /// Coordinates of each input point on the axes.
    pub projections: Vec<Vec<f64>>,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in decreasing order with eigenvectors as rows.
pub fn symmetric_eigen(matrix: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = matrix.len();
    if matrix.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidInput("matrix must be square".into()));
    }
    for i in 0..n {
        for j in 0..i {
            if (matrix[i][j] - matrix[j][i]).abs() > 1e-12 * (1.0 + matrix[i][j].abs()) {
                return Err(Error::InvalidInput("matrix must be symmetric".into()));
            }
        }
    }
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| v.iter().map(|row| row[i]).collect())
        .collect();
    Ok((values, vectors))
}

/// Flips `axis` so its largest-magnitude coordinate (first on ties) is positive.
pub fn orient(axis: &mut [f64]) {
    let mut best = 0;
    for (i, x) in axis.iter().enumerate() {
        if x.abs() > axis[best].abs() {
            best = i;
        }
    }
    if axis.get(best).is_some_and(|&x| x < 0.0) {
        axis.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Top-`k` principal components of `points` (rows).
pub fn pca(points: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidInput("pca needs at least two points".into()));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) || k == 0 || k > d {
        return Err(Error::InvalidInput("pca: ragged points or bad k".into()));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let s = centered.iter().map(|p| p[i] * p[j]).sum::<f64>() / n as f64;
            cov[i][j] = s;
            cov[j][i] = s;
        }
    }
    let (values, vectors) = symmetric_eigen(&cov)?;
    let mut components: Vec<Vec<f64>> = vectors.into_iter().take(k).collect();
    components.iter_mut().for_each(|c| orient(c));
    let projections = centered
        .iter()
        .map(|p| {
            components
                .iter()
                .map(|c| c.iter().zip(p).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        variances: values.into_iter().take(k).collect(),
        projections,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub task_id: String,
    pub batch_index: usize,
    pub z: Vec<f64>,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStudy {
    /// Mean Euclidean distance between embeddings of the same task.
    pub intra_mean: f64,
    /// Mean Euclidean distance between embeddings of different tasks.
    pub inter_mean: f64,
    pub points: Vec<EmbeddingPoint>,
    pub pca: Pca,
}

/// Embeds `batches_per_task` random training batches of each task and
/// compares within-task to between-task spread.
pub fn embedding_stability_study<R: Rng + ?Sized>(
    dvn: &DvnModel,
    tasks: &[&TaskDataset],
    batches_per_task: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<EmbeddingStudy> {
    if !dvn.mode().uses_learned() {
        return Err(Error::InvalidInput(
            "embedding study needs a model with learned meta-features".into(),
        ));
    }
    if batches_per_task < 2 || tasks.len() < 2 || batch_size == 0 {
        return Err(Error::InvalidInput(
            "need at least two tasks, two batches per task and a positive batch size".into(),
        ));
    }
    let mut owners = Vec::new();
    let mut zs = Vec::new();
    for (ti, t) in tasks.iter().enumerate() {
        let size = batch_size.min(t.split(Split::Train).len());
        for b in 0..batches_per_task {
            let batch = sample_batch(t, Split::Train, size, dvn.class_cap(), rng)?;
            zs.push(dvn.embed_task(&batch)?);
            owners.push((ti, b));
        }
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..zs.len() {
        for j in i + 1..zs.len() {
            let d = zs[i]
                .iter()
                .zip(&zs[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if owners[i].0 == owners[j].0 {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let pca = pca(&zs, 2)?;
    let points = owners
        .iter()
        .zip(zs)
        .zip(&pca.projections)
        .map(|((&(ti, b), z), p)| EmbeddingPoint {
            task_id: tasks[ti].task_id.clone(),
            batch_index: b,
            z,
            pc1: p[0],
            pc2: p[1],
        })
        .collect();
    Ok(EmbeddingStudy {
        intra_mean: intra / n_intra as f64,
        inter_mean: inter / n_inter as f64,
        points,
        pca,
    })
}
