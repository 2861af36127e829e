//! Pipeline configuration: one JSON document plus `DIVGEN_<SECTION>_<KEY>`
//! environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use divgen_core::harness::TrainRunConfig;
use divgen_core::hashing::sha256_hex;
use divgen_core::prompt::ExpandOptions;
use divgen_core::task::{validate_task, DomainCatalog};
use divgen_core::{BackendDescriptor, ClassificationTask, DomainStyle, ImageSize, TrickKind, TrickWeight};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "DIVGEN_";
const SECTIONS: [&str; 8] = ["task", "backend", "tricks", "sampler", "assembler", "train", "report", "paths"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: TaskSection,
    pub backend: BackendDescriptor,
    pub tricks: TricksSection,
    pub sampler: SamplerSection,
    pub assembler: AssemblerSection,
    pub train: TrainRunConfig,
    pub report: ReportSection,
    pub paths: PathsSection,
    pub master_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            task: TaskSection::default(),
            backend: BackendDescriptor::mock(),
            tricks: TricksSection::default(),
            sampler: SamplerSection::default(),
            assembler: AssemblerSection::default(),
            train: TrainRunConfig::default(),
            report: ReportSection::default(),
            paths: PathsSection::default(),
            master_seed: 0,
        }
    }
}

/// A preset name, optionally with field overrides, or a full inline task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub preset: Option<String>,
    pub name: Option<String>,
    pub class_labels: Option<Vec<String>>,
    pub native_image_size: Option<ImageSize>,
    pub per_class_count: Option<u32>,
    pub test_set_ref: Option<String>,
    pub style: Option<DomainStyle>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            preset: Some("cifar10".into()),
            name: None,
            class_labels: None,
            native_image_size: None,
            per_class_count: None,
            test_set_ref: None,
            style: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TricksSection {
    /// Used when a subcommand gets no `--trick`.
    pub trick: TrickKind,
    pub default_guidance: f64,
    pub ddim_steps: u32,
    pub generation_size: ImageSize,
    pub seed_share_mode: bool,
    /// Replaces the task style's domain list.
    pub domains: Option<Vec<String>>,
    /// Extra best-trick compositions, keyed by task name.
    pub best_tricks: BTreeMap<String, Vec<TrickWeight>>,
}

impl Default for TricksSection {
    fn default() -> Self {
        let d = ExpandOptions::default();
        Self {
            trick: TrickKind::BaseClass,
            default_guidance: d.default_guidance,
            ddim_steps: d.ddim_steps,
            generation_size: ImageSize::new(d.generation_width, d.generation_height),
            seed_share_mode: d.seed_share_mode,
            domains: None,
            best_tricks: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// `full_hull` or `k_subset`.
    pub scheme: String,
    pub k: usize,
    /// Requests per interpolation plan; `None` uses the task's per-class count.
    pub count: Option<usize>,
    pub rng_seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            scheme: "k_subset".into(),
            k: 3,
            count: None,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssemblerSection {
    pub anti_alias: bool,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
}

impl Default for AssemblerSection {
    fn default() -> Self {
        Self {
            anti_alias: true,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub ledger: PathBuf,
    pub format: String,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            ledger: "work/ledger.json".into(),
            format: "markdown".into(),
        }
    }
}

/// Output locations. Unset entries live under `work_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub work_dir: PathBuf,
    pub plan: Option<PathBuf>,
    pub staging: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub models: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            work_dir: "work".into(),
            plan: None,
            staging: None,
            dataset: None,
            models: None,
        }
    }
}

impl PathsSection {
    pub fn plan(&self) -> PathBuf {
        self.plan.clone().unwrap_or_else(|| self.work_dir.join("plan.jsonl"))
    }
    pub fn staging(&self) -> PathBuf {
        self.staging.clone().unwrap_or_else(|| self.work_dir.join("staging"))
    }
    pub fn dataset(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.work_dir.join("dataset"))
    }
    pub fn models(&self) -> PathBuf {
        self.models.clone().unwrap_or_else(|| self.work_dir.join("models"))
    }
}

impl PipelineConfig {
    /// Read `path` (or start from defaults), apply environment overrides
    /// and validate.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        Self::from_value(doc, std::env::vars())
    }

    pub fn from_value(
        mut doc: Value,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CliError> {
        let root = doc
            .as_object_mut()
            .ok_or_else(|| CliError::config("config must be a JSON object".into()))?;
        let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (name, raw) in vars {
            apply_override(root, &name, &raw)?;
        }
        if let Some(Value::Object(backend)) = root.get_mut("backend") {
            backend
                .entry("kind")
                .or_insert_with(|| Value::String("deterministic_mock".into()));
        }
        let config: Self = serde_json::from_value(doc).map_err(|e| CliError::config(e.to_string()))?;
        config.task()?;
        config.backend.validate().map_err(|e| CliError::config(format!("backend: {e}")))?;
        Ok(config)
    }

    /// SHA-256 of the canonical JSON form of the resolved config.
    pub fn digest(&self) -> String {
        let canonical: Value = serde_json::to_value(self).expect("config serializes");
        sha256_hex(canonical.to_string().as_bytes())
    }

    pub fn task(&self) -> Result<ClassificationTask, CliError> {
        let t = &self.task;
        let base = match &t.preset {
            Some(name) => Some(ClassificationTask::preset(name).map_err(|e| CliError::config(format!("task: {e}")))?),
            None => None,
        };
        let missing = |field: &str| CliError::config(format!("task.{field} is required without a preset"));
        let task = ClassificationTask {
            name: t.name.clone().or_else(|| base.as_ref().map(|b| b.name.clone())).ok_or_else(|| missing("name"))?,
            class_labels: t
                .class_labels
                .clone()
                .or_else(|| base.as_ref().map(|b| b.class_labels.clone()))
                .ok_or_else(|| missing("class_labels"))?,
            native_image_size: t
                .native_image_size
                .or_else(|| base.as_ref().map(|b| b.native_image_size))
                .ok_or_else(|| missing("native_image_size"))?,
            per_class_count: t
                .per_class_count
                .or_else(|| base.as_ref().map(|b| b.per_class_count))
                .ok_or_else(|| missing("per_class_count"))?,
            test_set_ref: t.test_set_ref.clone().or_else(|| base.as_ref().and_then(|b| b.test_set_ref.clone())),
            style: t.style.or_else(|| base.as_ref().map(|b| b.style)).unwrap_or_default(),
        };
        validate_task(task).map_err(|e| CliError::new("TaskInvalid", crate::error::Exit::Validation, e.to_string()))
    }

    pub fn expand_options(&self, task: &ClassificationTask) -> ExpandOptions {
        let tr = &self.tricks;
        ExpandOptions {
            default_guidance: tr.default_guidance,
            ddim_steps: tr.ddim_steps,
            generation_width: tr.generation_size.width,
            generation_height: tr.generation_size.height,
            seed_share_mode: tr.seed_share_mode,
            catalog: tr.domains.as_ref().map(|d| DomainCatalog {
                style: task.style,
                domains: d.clone(),
            }),
        }
    }
}

/// `DIVGEN_TRAIN_EPOCHS=5` sets `train.epochs`; `DIVGEN_MASTER_SEED` sets
/// the top-level seed. Values are parsed as JSON, falling back to a string.
fn apply_override(root: &mut Map<String, Value>, name: &str, raw: &str) -> Result<(), CliError> {
    let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if rest == "master_seed" {
        root.insert(rest, value);
        return Ok(());
    }
    let (section, key) = rest
        .split_once('_')
        .filter(|(s, k)| SECTIONS.contains(s) && !k.is_empty())
        .ok_or_else(|| CliError::config(format!("environment override {name}: unknown section")))?;
    let entry = root
        .entry(section.to_string())
        .or_insert_with(|| Value::Object(Map::new()));
    let obj = entry
        .as_object_mut()
        .ok_or_else(|| CliError::config(format!("{section} must be an object")))?;
    obj.insert(key.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_document_gives_defaults() {
        let c = PipelineConfig::from_value(json!({}), env(&[])).unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.task().unwrap().name, "cifar10");
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for doc in [json!({"colour": 1}), json!({"train": {"epoch": 3}}), json!({"paths": {"wrk": "x"}})] {
            let err = PipelineConfig::from_value(doc, env(&[])).unwrap_err();
            assert_eq!(err.code, "ConfigInvalid");
        }
    }

    #[test]
    fn env_overrides_apply() {
        let c = PipelineConfig::from_value(
            json!({"train": {"epochs": 9}}),
            env(&[
                ("DIVGEN_TRAIN_EPOCHS", "3"),
                ("DIVGEN_BACKEND_MAX_IN_FLIGHT", "2"),
                ("DIVGEN_MASTER_SEED", "17"),
                ("DIVGEN_TASK_PRESET", "eurosat"),
                ("HOME", "/root"),
            ]),
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.backend.max_in_flight, 2);
        assert_eq!(c.master_seed, 17);
        assert_eq!(c.task().unwrap().style, DomainStyle::Satellite);
    }

    #[test]
    fn bad_override_is_a_config_error() {
        for var in ["DIVGEN_NOPE_X", "DIVGEN_TRAIN_NOPE"] {
            let err = PipelineConfig::from_value(json!({}), env(&[(var, "1")])).unwrap_err();
            assert_eq!(err.code, "ConfigInvalid", "{var}");
        }
    }

    #[test]
    fn inline_task_needs_every_field() {
        let doc = json!({"task": {"preset": null, "name": "toy", "class_labels": ["a"]}});
        let err = PipelineConfig::from_value(doc, env(&[])).unwrap_err();
        assert!(err.message.contains("native_image_size"), "{}", err.message);
        let doc = json!({"task": {"preset": null, "name": "toy", "class_labels": ["a", "b"],
            "native_image_size": [16, 16], "per_class_count": 3}});
        let c = PipelineConfig::from_value(doc, env(&[])).unwrap();
        assert_eq!(c.task().unwrap().num_classes(), 2);
    }

    #[test]
    fn invalid_task_is_reported_as_such() {
        let doc = json!({"task": {"class_labels": ["a", "a"]}});
        assert_eq!(PipelineConfig::from_value(doc, env(&[])).unwrap_err().code, "TaskInvalid");
    }

    #[test]
    fn digest_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.master_seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
