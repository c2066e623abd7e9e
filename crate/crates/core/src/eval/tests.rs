use super::*;
use crate::db::{ExperimentDb, ExperimentRecord};
use crate::dvn::{DvnModel, DvnTrainConfig, MetaMode};
use crate::encoding::{ArchitectureEncoding, SearchSpaceSpec};
use crate::seeding;
use crate::task::{generate_synthetic_task, SyntheticTaskSpec, TaskDataset};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

fn space() -> SearchSpaceSpec {
    SearchSpaceSpec::desk()
}

fn task(id: &str, seed: u64) -> TaskDataset {
    generate_synthetic_task(&SyntheticTaskSpec {
        task_id: id.into(),
        seed,
        num_samples: 200,
        num_classes: 3,
        feature_dim: 16,
        margin: 3.0,
        noise_rate: 0.0,
        rotate: true,
        informative: 4,
        clusters_per_class: 1,
    })
    .unwrap()
}

/// Records whose performance is the same smooth function of u on every task.
fn shared_function_db(tasks: &[&TaskDataset], per_task: usize) -> ExperimentDb {
    let s = space();
    let mut db = ExperimentDb::new(&s);
    let w: Vec<f64> = {
        let mut r = seeding::rng(77);
        (0..s.encoding_len())
            .map(|_| seeding::gaussian(&mut r))
            .collect()
    };
    for (ti, t) in tasks.iter().enumerate() {
        let mut rng = seeding::rng(1000 + ti as u64);
        for i in 0..per_task {
            let u = ArchitectureEncoding::random_one_hot(&s, &mut rng).flatten();
            let x: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() / 40.0;
            db.append(ExperimentRecord {
                task_id: t.task_id.clone(),
                u,
                v: crate::nn::sigmoid(x),
                seed: i as u64,
                ts: 0,
                ok: true,
                fp: db.fingerprint().into(),
            })
            .unwrap();
        }
    }
    db
}

fn quick_config(modes: Vec<MetaMode>, repeats: usize) -> LooConfig {
    LooConfig {
        modes,
        repeats,
        dvn: DvnTrainConfig {
            max_steps: 4000,
            learning_rate: 3e-3,
            ..DvnTrainConfig::desk()
        },
        seed: 5,
        ..LooConfig::default()
    }
}

#[test]
fn twin_tasks_transfer_rankings() {
    let (a, b) = (task("a", 1), task("b", 2));
    let db = shared_function_db(&[&a, &b], 200);
    let tasks = vec![a, b];
    let out = leave_one_out(
        &tasks,
        &db,
        &space(),
        &quick_config(vec![MetaMode::LearnedMeta], 1),
    )
    .unwrap();
    assert_eq!(out.report.rows.len(), 2);
    for row in &out.report.rows {
        assert!(row.spearman > 0.9, "{row:?}");
    }
    assert_eq!(out.folds.len(), 2);
}

#[test]
fn single_repeat_has_zero_spread_and_aggregates_recompute() {
    let ts: Vec<TaskDataset> = (0..3).map(|i| task(&format!("t{i}"), i)).collect();
    let refs: Vec<&TaskDataset> = ts.iter().collect();
    let db = shared_function_db(&refs, 30);
    let mut cfg = quick_config(vec![MetaMode::NoMeta, MetaMode::PrecomputedMeta], 1);
    cfg.dvn.max_steps = 50;
    let rep = leave_one_out(&ts, &db, &space(), &cfg).unwrap().report;
    assert_eq!(rep.summary.len(), 6);
    for s in &rep.summary {
        assert_eq!(s.spearman_std, 0.0);
        assert_eq!(s.r2_std, 0.0);
    }

    cfg.repeats = 3;
    let rep = leave_one_out(&ts, &db, &space(), &cfg).unwrap().report;
    // parse the raw CSV back and recompute every aggregate
    let bytes = export::loo_rows_csv(&rep).unwrap();
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let parsed: Vec<LooRow> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            LooRow {
                task_id: r[0].into(),
                mode: r[1].parse().unwrap(),
                repeat: r[2].parse().unwrap(),
                spearman: r[3].parse().unwrap(),
                r2: r[4].parse().unwrap(),
                num_records: r[5].parse().unwrap(),
                train_steps: r[6].parse().unwrap(),
            }
        })
        .collect();
    assert_eq!(parsed, rep.rows);
    for (a, b) in summarize(&parsed).iter().zip(&rep.summary) {
        assert!((a.spearman_mean - b.spearman_mean).abs() <= 1e-12);
        assert!((a.spearman_std - b.spearman_std).abs() <= 1e-12);
        assert!((a.r2_mean - b.r2_mean).abs() <= 1e-12);
        assert!((a.r2_std - b.r2_std).abs() <= 1e-12);
        assert!(b.spearman_std >= 0.0 && (-1.0..=1.0).contains(&b.spearman_mean));
    }
    let table = String::from_utf8(export::loo_table_csv(&rep).unwrap()).unwrap();
    assert!(table.starts_with(
        "task_id,no_meta_spearman_mean,no_meta_spearman_std,no_meta_r2_mean,no_meta_r2_std,precomputed_meta_spearman_mean"
    ));
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn loo_results_do_not_depend_on_jobs() {
    let ts: Vec<TaskDataset> = (0..3).map(|i| task(&format!("t{i}"), i)).collect();
    let refs: Vec<&TaskDataset> = ts.iter().collect();
    let db = shared_function_db(&refs, 20);
    let mut cfg = quick_config(vec![MetaMode::LearnedMeta], 2);
    cfg.dvn.max_steps = 20;
    let a = leave_one_out(&ts, &db, &space(), &cfg).unwrap().report;
    cfg.jobs = 4;
    let b = leave_one_out(&ts, &db, &space(), &cfg).unwrap().report;
    assert_eq!(a, b);
}

#[test]
fn degenerate_held_out_task_is_skipped() {
    let ts: Vec<TaskDataset> = (0..3).map(|i| task(&format!("t{i}"), i)).collect();
    let mut db = shared_function_db(&[&ts[0], &ts[1]], 20);
    for i in 0..5 {
        db.append(ExperimentRecord {
            task_id: "t2".into(),
            u: vec![0.0; 24],
            v: 0.5,
            seed: i,
            ts: 0,
            ok: true,
            fp: db.fingerprint().into(),
        })
        .unwrap();
    }
    let mut cfg = quick_config(vec![MetaMode::NoMeta], 1);
    cfg.dvn.max_steps = 10;
    let rep = leave_one_out(&ts, &db, &space(), &cfg).unwrap().report;
    assert_eq!(rep.skipped_tasks, vec!["t2".to_string()]);
    assert_eq!(rep.rows.len(), 2);
    assert!(leave_one_out(&ts[..1], &db, &space(), &cfg).is_err());
}

#[test]
fn held_out_records_never_reach_training() {
    let ts: Vec<TaskDataset> = (0..3).map(|i| task(&format!("t{i}"), i)).collect();
    let refs: Vec<&TaskDataset> = ts.iter().collect();
    let db = shared_function_db(&refs, 10);
    let cfg = quick_config(vec![MetaMode::NoMeta], 1);
    let mut rng = seeding::rng(0);
    let mut dvn = DvnModel::new(MetaMode::NoMeta, &space(), 16, 16, &mut rng).unwrap();
    let dcfg = DvnTrainConfig {
        max_steps: 5,
        ..DvnTrainConfig::desk()
    };
    let log = dvn.train(&db, &[&ts[1], &ts[2]], &dcfg, &mut rng).unwrap();
    let held: Vec<usize> = db.task_records("t0").map(|(id, _)| id).collect();
    assert!(held.iter().all(|id| !log.record_ids.contains(id)));
    assert_eq!(log.record_ids.len(), 20);
    // a contaminated fold is caught by the audit
    let err = super::loo::train_and_score_fold(
        &db,
        &[&ts[0], &ts[1]],
        &ts[0],
        &space(),
        MetaMode::NoMeta,
        &cfg,
        1,
    )
    .unwrap_err();
    assert!(matches!(err, crate::Error::InvalidState(_)));
}

#[test]
fn adding_tasks_curve_shape_and_full_point() {
    let ts: Vec<TaskDataset> = (0..5).map(|i| task(&format!("t{i}"), i)).collect();
    let refs: Vec<&TaskDataset> = ts.iter().collect();
    let db = shared_function_db(&refs, 20);
    let mut base = quick_config(vec![MetaMode::NoMeta], 2);
    base.dvn.max_steps = 30;
    let cfg = AddingTasksConfig {
        orderings: 3,
        trainings: 2,
        mode: MetaMode::NoMeta,
        base: base.clone(),
    };
    let rep = adding_tasks_study(&ts, "t0", &db, &space(), &cfg).unwrap();
    let ks: Vec<usize> = rep.curve.iter().map(|p| p.num_tasks).collect();
    assert_eq!(ks, vec![1, 2, 3, 4]);
    assert!(rep.curve.iter().all(|p| p.samples == 6));
    // the last point is the standard leave-one-out cell
    let loo = leave_one_out(&ts, &db, &space(), &base).unwrap().report;
    let cell = loo.summary_for("t0", MetaMode::NoMeta).unwrap();
    let last = rep.curve.last().unwrap();
    assert!((last.spearman_mean - cell.spearman_mean).abs() < 1e-12);
    assert!((last.r2_mean - cell.r2_mean).abs() < 1e-12);
    assert!(adding_tasks_study(&ts[..3], "t0", &db, &space(), &cfg).is_err());
    let csv = String::from_utf8(export::curve_csv(&rep).unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 6);
}

fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeding::rng(seed);
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| seeding::gaussian(&mut rng) * (1.0 + j as f64))
                .collect()
        })
        .collect()
}

#[test]
fn eigen_matches_dense_oracle() {
    for seed in 0..5 {
        let pts = random_points(40, 12, seed);
        let p = pca(&pts, 2).unwrap();
        let n = pts.len();
        let centered = DMatrix::from_fn(n, 12, |i, j| pts[i][j] - p.mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut idx: Vec<usize> = (0..12).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for k in 0..2 {
            let col = eig.eigenvectors.column(idx[k]);
            let dot: f64 = col.iter().zip(&p.components[k]).map(|(a, b)| a * b).sum();
            let sign = dot.signum();
            for (a, b) in col.iter().zip(&p.components[k]) {
                assert!((sign * a - b).abs() < 1e-8);
            }
            assert!((eig.eigenvalues[idx[k]] - p.variances[k]).abs() < 1e-8);
        }
    }
}

#[test]
fn pca_sign_convention_and_exact_plane() {
    let mut rng = seeding::rng(3);
    let d = 50;
    let basis: Vec<Vec<f64>> = {
        let q = crate::task::random_orthogonal(d, &mut rng);
        vec![q[0].clone(), q[1].clone()]
    };
    let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pts: Vec<Vec<f64>> = (0..30)
        .map(|_| {
            let (a, b) = (
                3.0 * seeding::gaussian(&mut rng),
                seeding::gaussian(&mut rng),
            );
            (0..d)
                .map(|j| offset[j] + a * basis[0][j] + b * basis[1][j])
                .collect()
        })
        .collect();
    let p = pca(&pts, 2).unwrap();
    for (x, proj) in pts.iter().zip(&p.projections) {
        for j in 0..d {
            let rec = p.mean[j] + proj[0] * p.components[0][j] + proj[1] * p.components[1][j];
            assert!((rec - x[j]).abs() < 1e-9);
        }
    }
    for c in &p.components {
        let big = c
            .iter()
            .cloned()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        assert!(big > 0.0);
    }
    let mut flipped = vec![0.5, -0.9, 0.9];
    orient(&mut flipped);
    assert_eq!(flipped, vec![-0.5, 0.9, -0.9]);
    assert!(pca(&pts[..1], 2).is_err());
}

#[test]
fn identical_tasks_have_indistinguishable_spread() {
    let t = task("same", 9);
    let copy = t.clone().with_task_id("copy");
    let m = DvnModel::new(
        MetaMode::LearnedMeta,
        &space(),
        16,
        16,
        &mut seeding::rng(1),
    )
    .unwrap();
    let st = embedding_stability_study(&m, &[&t, &copy], 10, 32, &mut seeding::rng(2)).unwrap();
    assert!(st.intra_mean > 0.0);
    let ratio = st.inter_mean / st.intra_mean;
    assert!((0.8..1.25).contains(&ratio), "ratio {ratio}");
    assert_eq!(st.points.len(), 20);
    let csv = String::from_utf8(export::pca_csv(&st).unwrap()).unwrap();
    assert!(csv.starts_with("task_id,batch_index,pc1,pc2\n"));

    let nm = DvnModel::new(MetaMode::NoMeta, &space(), 16, 16, &mut seeding::rng(1)).unwrap();
    assert!(embedding_stability_study(&nm, &[&t, &copy], 10, 32, &mut seeding::rng(2)).is_err());
    assert!(embedding_stability_study(&m, &[&t, &copy], 1, 32, &mut seeding::rng(2)).is_err());
}

#[test]
fn search_eval_without_baseline_has_only_proposed_column() {
    let t = task("s", 4);
    let m = DvnModel::new(MetaMode::NoMeta, &space(), 16, 16, &mut seeding::rng(1)).unwrap();
    let cfg = SearchEvalConfig {
        repeats: 1,
        baseline_samples: 0,
        inference: crate::inference::InferenceConfig {
            max_iters: 20,
            num_starting_points: 2,
            ..Default::default()
        },
        child: crate::child::ChildTrainConfig {
            epochs: 1,
            ..crate::child::ChildTrainConfig::desk()
        },
        ..SearchEvalConfig::default()
    };
    let rep = search_quality_eval(&[t], &[("s".into(), &m)], &space(), &cfg).unwrap();
    assert_eq!(rep.rows.len(), 1);
    assert_eq!(rep.rows[0].arm, Arm::Proposed);
    let s = &rep.summary[0];
    assert!(s.random_val_median.is_none() && s.beats_random_median().is_none());
    assert_eq!(s.proposed_val_std, 0.0);
    assert!((0.0..=1.0).contains(&s.proposed_test_mean));
}

#[test]
fn search_eval_counts_baselines() {
    let t = task("s", 5);
    let m = DvnModel::new(MetaMode::NoMeta, &space(), 16, 16, &mut seeding::rng(1)).unwrap();
    let cfg = SearchEvalConfig {
        repeats: 2,
        baseline_samples: 3,
        inference: crate::inference::InferenceConfig {
            max_iters: 10,
            num_starting_points: 2,
            ..Default::default()
        },
        child: crate::child::ChildTrainConfig {
            epochs: 1,
            ..crate::child::ChildTrainConfig::desk()
        },
        ..SearchEvalConfig::default()
    };
    let rep = search_quality_eval(&[t], &[("s".into(), &m)], &space(), &cfg).unwrap();
    assert_eq!(rep.rows.len(), 5);
    let vals: Vec<f64> = rep
        .rows
        .iter()
        .filter(|r| r.arm == Arm::Random)
        .map(|r| r.validation_accuracy)
        .collect();
    assert_eq!(rep.summary[0].random_val_median, Some(median(&vals)));
    assert_eq!(
        export::search_csv(&rep)
            .unwrap()
            .iter()
            .filter(|&&b| b == b'\n')
            .count(),
        6
    );
    assert!(search_quality_eval(&[], &[("s".into(), &m)], &space(), &cfg).is_err());
}
