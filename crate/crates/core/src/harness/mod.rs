//! Training classifiers from scratch on synthetic datasets and measuring
//! top-1 accuracy on real test images.
//!
//! Models are written in candle and run on the CPU. A trained model is a
//! single safetensors file whose metadata binds it to the exact manifest
//! it was trained on.

mod arch;
mod artifact;
mod data;
mod eval;
mod params;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::{DomainStyle, ImageSize};

pub use arch::{Architecture, Network};
pub use artifact::{ModelMeta, TrainedModel, ARTIFACT_FORMAT};
pub use data::{load_manifest_images, load_test_set, LabeledImages};
pub use eval::{
    evaluate, extract_features, Classifier, EvalResult, FeatureMatrix, FeatureRow, FeatureSource,
};
pub use train::{train, train_on, EpochStats};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("manifest failed verification: {}", violations.join("; "))]
    ManifestInvalid { violations: Vec<String> },
    #[error("unknown architecture {0:?}; registered: {names}", names = Architecture::NAMES.join(", "))]
    UnknownArchitecture(String),
    #[error("{path}: image is {found}, expected {expected}")]
    GeometryMismatch {
        path: String,
        expected: ImageSize,
        found: ImageSize,
    },
    #[error("test set {path}: {message}")]
    TestSetUnreadable { path: String, message: String },
    #[error("model has {model} classes, task has {task}")]
    ClassCountMismatch { model: usize, task: usize },
    #[error("this classifier exposes no feature layer")]
    FeatureHookUnavailable,
    #[error("model artifact {path}: {message}")]
    Artifact { path: String, message: String },
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub const DEFAULT_EPOCHS: usize = 200;
pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_LEARNING_RATE: f64 = 2e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Half a cosine period from the initial rate down to zero.
    #[default]
    CosineAnnealing,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub architecture: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub lr_schedule: LrSchedule,
    /// Explicit value; `None` resolves from the architecture and task family.
    pub weight_decay: Option<f64>,
    pub init: Init,
    pub seed: u64,
    /// Random horizontal flips. Off unless asked for.
    pub augment: bool,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            architecture: "resnet50".into(),
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            optimizer: Optimizer::default(),
            lr_schedule: LrSchedule::default(),
            weight_decay: None,
            init: Init::default(),
            seed: 0,
            augment: false,
        }
    }
}

impl TrainRunConfig {
    pub fn for_architecture(architecture: &str) -> Self {
        Self {
            architecture: architecture.into(),
            ..Self::default()
        }
    }

    pub fn resolved_weight_decay(&self, family: DomainStyle) -> f64 {
        resolve_weight_decay(&self.architecture, family, self.weight_decay)
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::CosineAnnealing => cosine_lr(self.learning_rate, epoch, self.epochs),
        }
    }
}

/// MobileNetV3 always trains with 0.1; other architectures use 0.9 on
/// object-photo tasks and 0.3 on satellite tasks. An explicit value wins.
pub fn resolve_weight_decay(architecture: &str, family: DomainStyle, explicit: Option<f64>) -> f64 {
    if let Some(wd) = explicit {
        return wd;
    }
    if architecture == "mobilenet_v3_small" {
        return 0.1;
    }
    match family {
        DomainStyle::GenericObjects => 0.9,
        DomainStyle::Satellite => 0.3,
    }
}

/// `lr0 * (1 + cos(pi * epoch / epochs)) / 2`, clamped at zero past the end.
pub fn cosine_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return lr0;
    }
    let t = (epoch.min(epochs) as f64) / epochs as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults() {
        let c = TrainRunConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.learning_rate), (200, 128, 2e-4));
        assert_eq!(c.optimizer, Optimizer::default());
        assert!(matches!(c.optimizer, Optimizer::AdamW { .. }));
        assert_eq!(c.lr_schedule, LrSchedule::CosineAnnealing);
        assert_eq!(c.init, Init::Random);
        assert!(!c.augment);
    }

    #[test]
    fn weight_decay_table() {
        use DomainStyle::*;
        let table = [
            ("resnet50", GenericObjects, 0.9),
            ("resnet50", Satellite, 0.3),
            ("resnet101", GenericObjects, 0.9),
            ("resnet101", Satellite, 0.3),
            ("vit_b", GenericObjects, 0.9),
            ("vit_b", Satellite, 0.3),
            ("convnext_small", GenericObjects, 0.9),
            ("convnext_small", Satellite, 0.3),
            ("mobilenet_v3_small", GenericObjects, 0.1),
            ("mobilenet_v3_small", Satellite, 0.1),
        ];
        for (arch, family, wd) in table {
            assert_eq!(resolve_weight_decay(arch, family, None), wd, "{arch} {family:?}");
            assert_eq!(resolve_weight_decay(arch, family, Some(0.05)), 0.05);
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(2e-4, 0, 200), 2e-4);
        assert!(cosine_lr(2e-4, 200, 200).abs() < 1e-9);
        assert!((cosine_lr(2e-4, 100, 200) - 1e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(2e-4, 0, 0), 2e-4);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<TrainRunConfig>(r#"{"epoch": 3}"#).is_err());
        let c: TrainRunConfig = serde_json::from_str(r#"{"architecture": "tiny_cnn", "epochs": 3}"#).unwrap();
        assert_eq!((c.architecture.as_str(), c.epochs, c.batch_size), ("tiny_cnn", 3, 128));
    }

    proptest! {
        #[test]
        fn cosine_non_increasing(epochs in 1usize..500, lr0 in 1e-6f64..1.0) {
            let mut prev = f64::INFINITY;
            for e in 0..=epochs {
                let lr = cosine_lr(lr0, e, epochs);
                prop_assert!(lr <= prev + 1e-18);
                prop_assert!(lr >= 0.0);
                prev = lr;
            }
        }
    }
}
