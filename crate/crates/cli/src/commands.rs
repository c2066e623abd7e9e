use std::path::{Path, PathBuf};

use archinfer::db::{self, ExperimentDb, PopulateOptions};
use archinfer::dvn::{DvnModel, MetaMode};
use archinfer::eval::{self, export, AddingTasksConfig, LooConfig, SearchEvalConfig};
use archinfer::inference::infer_architecture;
use archinfer::seeding;
use archinfer::task::{self, generate_synthetic_task, CsvSchema, SyntheticTaskSpec, TaskDataset};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::LoadedConfig;
use crate::{CliError, Common};

type CmdResult = Result<(), CliError>;

pub fn setup(common: &Common) -> Result<LoadedConfig, CliError> {
    let mut loaded = LoadedConfig::load(&common.config, &common.set)?;
    if let Some(seed) = common.seed {
        loaded.config.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        loaded.config.jobs = jobs;
    }
    if let Some(out) = &common.out {
        let cwd = std::env::current_dir().map_err(|e| CliError::Failure(e.to_string()))?;
        loaded.config.output_dir = cwd.join(out);
    }
    if loaded.config.jobs == 0 {
        return Err(CliError::Usage("jobs must be at least 1".into()));
    }
    Ok(loaded)
}

fn seed_for(cfg: &LoadedConfig, name: &str) -> u64 {
    seeding::derive(cfg.config.seed, &[seeding::tag(name)])
}

fn write(path: &Path, bytes: &[u8]) -> CmdResult {
    export::write_report(path, bytes)?;
    info!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tasks: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    task_id: String,
    /// Relative to the manifest.
    file: PathBuf,
    #[serde(default)]
    has_header: bool,
    #[serde(default)]
    split_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<SyntheticTaskSpec>,
}

fn suite_specs(cfg: &LoadedConfig) -> Result<Vec<SyntheticTaskSpec>, CliError> {
    let tasks = &cfg.config.tasks;
    if !tasks.synthetic.is_empty() {
        return Ok(tasks.synthetic.clone());
    }
    match &tasks.desk_suite {
        Some(s) => Ok(task::desk_suite(s.seed, s.num_samples)),
        None => Err(CliError::Usage(
            "configure tasks.synthetic or tasks.desk_suite to generate tasks".into(),
        )),
    }
}

pub fn gen_tasks(cfg: &LoadedConfig) -> CmdResult {
    let specs = suite_specs(cfg)?;
    let manifest_path = cfg.manifest_path();
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut ids = std::collections::HashSet::new();
    let mut entries = Vec::new();
    let mut datasets = Vec::new();
    for spec in &specs {
        if !ids.insert(spec.task_id.clone()) {
            return Err(CliError::Usage(format!(
                "duplicate task id {}",
                spec.task_id
            )));
        }
        datasets.push(generate_synthetic_task(spec)?);
    }
    for (spec, ds) in specs.iter().zip(&datasets) {
        let file = PathBuf::from(format!("{}.csv", spec.task_id));
        write(&dir.join(&file), ds.to_csv().as_bytes())?;
        entries.push(ManifestEntry {
            task_id: spec.task_id.clone(),
            file,
            has_header: false,
            split_seed: spec.split_seed(),
            spec: Some(spec.clone()),
        });
    }
    write(
        &manifest_path,
        &export::json_bytes(&Manifest { tasks: entries })?,
    )?;
    info!("generated {} tasks", specs.len());
    Ok(())
}

fn load_tasks(cfg: &LoadedConfig) -> Result<Vec<TaskDataset>, CliError> {
    let path = cfg.manifest_path();
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::from_io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let tasks = manifest
        .tasks
        .iter()
        .map(|e| {
            let schema = CsvSchema {
                has_header: e.has_header,
                split_seed: e.split_seed,
            };
            task::load_csv_task(&dir.join(&e.file), &e.task_id, &schema)
        })
        .collect::<archinfer::Result<Vec<_>>>()?;
    if tasks.is_empty() {
        return Err(CliError::MissingInput(format!(
            "{}: no tasks",
            path.display()
        )));
    }
    Ok(tasks)
}

fn find_task<'a>(tasks: &'a [TaskDataset], id: &str) -> Result<&'a TaskDataset, CliError> {
    tasks
        .iter()
        .find(|t| t.task_id == id)
        .ok_or_else(|| CliError::Usage(format!("unknown task {id}")))
}

fn load_db(cfg: &LoadedConfig) -> Result<ExperimentDb, CliError> {
    Ok(ExperimentDb::load_for(&cfg.db_path(), &cfg.config.space)?)
}

fn load_dvn(cfg: &LoadedConfig) -> Result<DvnModel, CliError> {
    let (dvn, _) = DvnModel::load(&cfg.checkpoint_path())?;
    if dvn.fingerprint() != cfg.config.space.fingerprint() {
        return Err(CliError::MissingInput(
            "checkpoint was trained on a different search space".into(),
        ));
    }
    Ok(dvn)
}

fn timestamp(cfg: &LoadedConfig) -> u64 {
    cfg.config.timestamp.unwrap_or_else(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    })
}

pub fn populate(cfg: &LoadedConfig, resume: bool) -> CmdResult {
    let tasks = load_tasks(cfg)?;
    let path = cfg.db_path();
    let mut db = if resume && path.exists() {
        ExperimentDb::load_for(&path, &cfg.config.space)?
    } else {
        ExperimentDb::new(&cfg.config.space)
    };
    let opts = PopulateOptions {
        m_per_task: cfg.config.populate.m_per_task,
        seed: seed_for(cfg, "populate"),
        timestamp: timestamp(cfg),
        jobs: cfg.config.jobs,
    };
    let added = db::populate(
        &mut db,
        &tasks,
        &cfg.config.space,
        &cfg.config.populate.child,
        &opts,
    )?;
    db.save(&path)?;
    info!(
        "appended {added} records; {} in {}",
        db.len(),
        path.display()
    );
    Ok(())
}

pub fn train_dvn(cfg: &LoadedConfig) -> CmdResult {
    let tasks = load_tasks(cfg)?;
    let db = load_db(cfg)?;
    let c = &cfg.config;
    let mut rng = seeding::rng(seed_for(cfg, "train-dvn"));
    let mut dvn = DvnModel::new(c.dvn.mode, &c.space, c.feature_dim, c.class_cap, &mut rng)?;
    let refs: Vec<&TaskDataset> = tasks.iter().collect();
    let log = dvn.train(&db, &refs, &c.dvn.train, &mut rng)?;
    let path = cfg.checkpoint_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::from_io(dir, e))?;
    }
    dvn.save(&path, Some(&c.dvn.train))?;
    info!("wrote {}", path.display());
    let mut csv = String::from("step,round,task_id,outer,inner,loss\n");
    for s in &log.steps {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.step, s.round, s.task, s.outer, s.inner, s.loss
        ));
    }
    write(&cfg.out("dvn_train_log.csv"), csv.as_bytes())?;
    info!(
        "trained {} steps on {} tasks{}",
        log.steps.len(),
        log.tasks_used.len(),
        if log.stopped_early {
            " (converged early)"
        } else {
            ""
        }
    );
    Ok(())
}

pub fn predict(cfg: &LoadedConfig, task_id: &str, u: Option<&str>) -> CmdResult {
    let tasks = load_tasks(cfg)?;
    let task = find_task(&tasks, task_id)?;
    let dvn = load_dvn(cfg)?;
    let ctx = dvn.context_for(task)?;
    if let Some(u) = u {
        let u: Vec<f64> = serde_json::from_str(u)
            .map_err(|e| CliError::Usage(format!("--u must be a JSON array of numbers: {e}")))?;
        println!("{}", dvn.predict(&u, &ctx)?);
        return Ok(());
    }
    let db = load_db(cfg)?;
    let triplets = db.normalized_targets(task_id)?;
    let mut csv = String::from("record_id,v,target,prediction\n");
    let mut pred = Vec::new();
    for t in &triplets {
        let p = dvn.predict(&t.u, &ctx)?;
        csv.push_str(&format!("{},{},{},{}\n", t.record_id, t.raw, t.target, p));
        pred.push(p);
    }
    let path = cfg.out(&format!("predictions-{task_id}.csv"));
    write(&path, csv.as_bytes())?;
    let raw: Vec<f64> = triplets.iter().map(|t| t.raw).collect();
    let norm: Vec<f64> = triplets.iter().map(|t| t.target).collect();
    println!(
        "{task_id}: {} records, spearman {:.4}, r2 {:.4}",
        triplets.len(),
        eval::spearman(&pred, &raw)?,
        eval::r2(&pred, &norm)?
    );
    Ok(())
}

pub fn infer(cfg: &LoadedConfig, task_id: &str) -> CmdResult {
    let tasks = load_tasks(cfg)?;
    let task = find_task(&tasks, task_id)?;
    let dvn = load_dvn(cfg)?;
    let mut inf = cfg.config.inference.clone();
    inf.jobs = cfg.config.jobs;
    let mut rng = seeding::rng_for(
        cfg.config.seed,
        &[seeding::tag("infer"), seeding::tag(task_id)],
    );
    let res = infer_architecture(&dvn, task, &cfg.config.space, &inf, &mut rng)?;
    if res.child_training_steps != 0 {
        return Err(CliError::Failure("inference trained a child model".into()));
    }
    write(
        &cfg.out(&format!("inference-{task_id}.json")),
        &export::json_bytes(&res)?,
    )?;
    println!("best predicted value: {:.6}", res.best_value);
    println!("architecture: {}", res.architecture);
    Ok(())
}

fn loo_config(cfg: &LoadedConfig, modes: Vec<MetaMode>) -> LooConfig {
    let c = &cfg.config;
    LooConfig {
        modes,
        repeats: c.evaluation.repeats,
        dvn: c.dvn.train.clone(),
        seed: seed_for(cfg, "evaluate-loo"),
        jobs: c.jobs,
        feature_dim: c.feature_dim,
        class_cap: c.class_cap,
    }
}

pub fn evaluate_loo(cfg: &LoadedConfig, modes: Option<&str>) -> CmdResult {
    let modes = match modes {
        Some(list) => list
            .split(',')
            .map(|m| m.trim().parse::<MetaMode>())
            .collect::<archinfer::Result<Vec<_>>>()?,
        None => cfg.config.evaluation.modes.clone(),
    };
    let tasks = load_tasks(cfg)?;
    let db = load_db(cfg)?;
    let out = eval::leave_one_out(&tasks, &db, &cfg.config.space, &loo_config(cfg, modes))?;
    let report = &out.report;
    write(&cfg.out("loo_rows.csv"), &export::loo_rows_csv(report)?)?;
    write(&cfg.out("loo_table.csv"), &export::loo_table_csv(report)?)?;
    write(&cfg.out("loo_summary.json"), &export::json_bytes(report)?)?;
    for s in &report.summary {
        info!(
            "{} [{}]: spearman {:.3} ± {:.3}, r2 {:.3} ± {:.3}",
            s.task_id,
            s.mode.name(),
            s.spearman_mean,
            s.spearman_std,
            s.r2_mean,
            s.r2_std
        );
    }
    Ok(())
}

pub fn study_tasks(cfg: &LoadedConfig, task_id: Option<&str>) -> CmdResult {
    let tasks = load_tasks(cfg)?;
    let db = load_db(cfg)?;
    let c = &cfg.config;
    let test = match task_id.or(c.studies.test_task.as_deref()) {
        Some(t) => find_task(&tasks, t)?.task_id.clone(),
        None => tasks[0].task_id.clone(),
    };
    let study = AddingTasksConfig {
        orderings: c.studies.orderings,
        trainings: c.studies.trainings,
        mode: c.dvn.mode,
        base: loo_config(cfg, vec![c.dvn.mode]),
    };
    let rep = eval::adding_tasks_study(&tasks, &test, &db, &c.space, &study)?;
    write(&cfg.out("adding_tasks.csv"), &export::curve_csv(&rep)?)?;
    write(&cfg.out("adding_tasks.json"), &export::json_bytes(&rep)?)?;
    Ok(())
}

#[derive(Serialize)]
struct EmbeddingStats<'a> {
    intra_mean: f64,
    inter_mean: f64,
    batches_per_task: usize,
    batch_size: usize,
    components: &'a [Vec<f64>],
    variances: &'a [f64],
}

pub fn study_embeddings(cfg: &LoadedConfig) -> CmdResult {
    let tasks = load_tasks(cfg)?;
    let dvn = load_dvn(cfg)?;
    let s = &cfg.config.studies;
    let refs: Vec<&TaskDataset> = tasks.iter().collect();
    let mut rng = seeding::rng(seed_for(cfg, "study-embeddings"));
    let st =
        eval::embedding_stability_study(&dvn, &refs, s.batches_per_task, s.batch_size, &mut rng)?;
    write(&cfg.out("embedding_pca.csv"), &export::pca_csv(&st)?)?;
    let stats = EmbeddingStats {
        intra_mean: st.intra_mean,
        inter_mean: st.inter_mean,
        batches_per_task: s.batches_per_task,
        batch_size: s.batch_size,
        components: &st.pca.components,
        variances: &st.pca.variances,
    };
    write(
        &cfg.out("embedding_stats.json"),
        &export::json_bytes(&stats)?,
    )?;
    info!("intra {:.4} vs inter {:.4}", st.intra_mean, st.inter_mean);
    Ok(())
}

pub fn search_eval(cfg: &LoadedConfig) -> CmdResult {
    let tasks = load_tasks(cfg)?;
    let db = load_db(cfg)?;
    let c = &cfg.config;
    let mut loo = loo_config(cfg, vec![c.dvn.mode]);
    loo.repeats = 1;
    let folds = eval::leave_one_out(&tasks, &db, &c.space, &loo)?.folds;
    let models: Vec<(String, &DvnModel)> =
        folds.iter().map(|f| (f.held_out.clone(), &f.dvn)).collect();
    let search = SearchEvalConfig {
        inference: c.inference.clone(),
        child: c
            .search
            .child
            .clone()
            .unwrap_or_else(|| c.populate.child.clone()),
        baseline_samples: c.search.baseline_samples,
        repeats: c.search.repeats,
        seed: seed_for(cfg, "search-eval"),
        jobs: c.jobs,
    };
    let rep = eval::search_quality_eval(&tasks, &models, &c.space, &search)?;
    write(&cfg.out("search_rows.csv"), &export::search_csv(&rep)?)?;
    write(
        &cfg.out("search_summary.json"),
        &export::json_bytes(&rep.summary)?,
    )?;
    let wins = rep
        .summary
        .iter()
        .filter(|s| s.beats_random_median() == Some(true))
        .count();
    info!(
        "inferred architecture at or above the random median on {wins}/{} tasks",
        rep.summary.len()
    );
    Ok(())
}
