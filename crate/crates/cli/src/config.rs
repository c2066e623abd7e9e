//! Run configuration: one JSON file plus `--set` overrides.

use std::path::{Path, PathBuf};

use archinfer::child::ChildTrainConfig;
use archinfer::dvn::{DvnTrainConfig, MetaMode};
use archinfer::encoding::SearchSpaceSpec;
use archinfer::inference::InferenceConfig;
use archinfer::task::{SyntheticTaskSpec, DEFAULT_CLASS_CAP, DEFAULT_FEATURE_DIM};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub space: SearchSpaceSpec,
    #[serde(default)]
    pub tasks: TasksConfig,
    #[serde(default = "default_db")]
    pub db: PathBuf,
    #[serde(default)]
    pub populate: PopulateConfig,
    #[serde(default)]
    pub dvn: DvnConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub studies: StudiesConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    /// Value for the `ts` field of new database records; the current time
    /// when absent.
    #[serde(default)]
    pub timestamp: Option<u64>,
    #[serde(default = "default_one")]
    pub jobs: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_class_cap")]
    pub class_cap: usize,
}

fn default_db() -> PathBuf {
    "experiments.ndjson".into()
}

fn default_out() -> PathBuf {
    "out".into()
}

fn default_one() -> usize {
    1
}

fn default_feature_dim() -> usize {
    DEFAULT_FEATURE_DIM
}

fn default_class_cap() -> usize {
    DEFAULT_CLASS_CAP
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksConfig {
    /// Explicit synthetic task recipes for `gen-tasks`.
    pub synthetic: Vec<SyntheticTaskSpec>,
    /// The built-in ten-task suite, used when `synthetic` is empty.
    pub desk_suite: Option<DeskSuite>,
    /// Task manifest read by every other command; defaults to
    /// `<output_dir>/tasks/manifest.json`.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskSuite {
    pub seed: u64,
    pub num_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulateConfig {
    pub m_per_task: usize,
    pub child: ChildTrainConfig,
}

impl Default for PopulateConfig {
    fn default() -> Self {
        Self {
            m_per_task: 200,
            child: ChildTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DvnConfig {
    pub mode: MetaMode,
    pub train: DvnTrainConfig,
    /// Checkpoint path; defaults to `<output_dir>/dvn.json`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for DvnConfig {
    fn default() -> Self {
        Self {
            mode: MetaMode::LearnedMeta,
            train: DvnTrainConfig::default(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub modes: Vec<MetaMode>,
    pub repeats: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            modes: vec![MetaMode::NoMeta, MetaMode::LearnedMeta],
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudiesConfig {
    /// Held-out task of the adding-tasks study; the first task when absent.
    pub test_task: Option<String>,
    pub orderings: usize,
    pub trainings: usize,
    pub batches_per_task: usize,
    pub batch_size: usize,
}

impl Default for StudiesConfig {
    fn default() -> Self {
        Self {
            test_task: None,
            orderings: 5,
            trainings: 2,
            batches_per_task: 10,
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub baseline_samples: usize,
    pub repeats: usize,
    /// Child schedule for the compared models; the populate schedule when absent.
    pub child: Option<ChildTrainConfig>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            baseline_samples: 10,
            repeats: 3,
            child: None,
        }
    }
}

/// Sets `path` (dot separated) in a JSON object tree, creating objects on
/// the way. The value is parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad --set key {key:?}")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Usage(format!("--set {key}: {part} is not inside an object"))
        })?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("--set {key}: parent is not an object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub struct LoadedConfig {
    pub config: RunConfig,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        config.space.validate().map_err(CliError::from)?;
        let base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { config, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir().join(name)
    }

    pub fn db_path(&self) -> PathBuf {
        self.resolve(&self.config.db)
    }

    pub fn manifest_path(&self) -> PathBuf {
        match &self.config.tasks.manifest {
            Some(p) => self.resolve(p),
            None => self.out_dir().join("tasks").join("manifest.json"),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        match &self.config.dvn.checkpoint {
            Some(p) => self.resolve(p),
            None => self.out("dvn.json"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_follow_dotted_paths() {
        let mut v = json!({"seed": 1, "dvn": {"train": {"max_steps": 5}}});
        apply_override(&mut v, "dvn.train.max_steps=7").unwrap();
        apply_override(&mut v, "dvn.mode=learned_meta").unwrap();
        apply_override(&mut v, "evaluation.modes=[\"no_meta\"]").unwrap();
        assert_eq!(v["dvn"]["train"]["max_steps"], json!(7));
        assert_eq!(v["dvn"]["mode"], json!("learned_meta"));
        assert_eq!(v["evaluation"]["modes"], json!(["no_meta"]));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "seed.x=1").is_err());
        assert!(apply_override(&mut v, "a..b=1").is_err());
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c: RunConfig = serde_json::from_value(json!({"seed": 3})).unwrap();
        assert_eq!(c.evaluation.repeats, 3);
        assert_eq!(c.inference.num_starting_points, 10);
        assert_eq!(c.dvn.train.k_inner_iters, 2);
        assert!(serde_json::from_value::<RunConfig>(json!({})).is_err());
        assert!(serde_json::from_value::<RunConfig>(json!({"seed": 1, "typo": 2})).is_err());
    }
}
