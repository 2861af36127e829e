//! Problem definition for model-agnostic zero-shot classification and the
//! vocabulary shared by every stage of the pipeline.
//!
//! A [`ClassificationTask`] names the unseen classes, the geometry real test
//! images come in, and how many synthetic images to produce per class. There
//! are no seen classes and no real training data: the synthetic dataset built
//! later is the only training signal.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskError {
    #[error("class_labels[{index}]: duplicate class label {label:?}")]
    DuplicateClass { index: usize, label: String },
    #[error("class_labels[{index}]: class label is empty after trimming")]
    EmptyClass { index: usize },
    #[error("class_labels: task has no classes")]
    NoClasses,
    #[error("{field}: {value} is below the minimum of {min}")]
    InvalidGeometry { field: &'static str, value: u32, min: u32 },
    #[error("per_class_count: must be at least 1")]
    InvalidCount,
    #[error("unknown trick {0:?}")]
    UnknownTrick(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

/// Image width and height in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(u32, u32)", into = "(u32, u32)")]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub const fn square(side: u32) -> Self {
        Self::new(side, side)
    }

    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl From<(u32, u32)> for ImageSize {
    fn from((width, height): (u32, u32)) -> Self {
        Self { width, height }
    }
}

impl From<ImageSize> for (u32, u32) {
    fn from(s: ImageSize) -> Self {
        (s.width, s.height)
    }
}

impl fmt::Display for ImageSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Which family of domain list and training defaults a task follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainStyle {
    /// Everyday object classes (the CIFAR datasets).
    #[default]
    GenericObjects,
    /// Remote-sensing classes (EuroSAT); prompts need satellite context.
    Satellite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationTask {
    pub name: String,
    /// Canonical class-index order for everything downstream.
    pub class_labels: Vec<String>,
    pub native_image_size: ImageSize,
    pub per_class_count: u32,
    /// Locator for the real evaluation images. Opaque at this layer.
    #[serde(default)]
    pub test_set_ref: Option<String>,
    #[serde(default)]
    pub style: DomainStyle,
}

pub const MIN_IMAGE_SIDE: u32 = 8;

impl ClassificationTask {
    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_labels.iter().position(|l| l == label)
    }

    /// One of the shipped presets (`cifar10`, `cifar100`, `eurosat`),
    /// matched case-insensitively.
    pub fn preset(name: &str) -> Result<Self, TaskError> {
        let source = match name.to_ascii_lowercase().as_str() {
            "cifar10" => include_str!("../presets/cifar10.json"),
            "cifar100" => include_str!("../presets/cifar100.json"),
            "eurosat" => include_str!("../presets/eurosat.json"),
            _ => return Err(TaskError::UnknownPreset(name.to_string())),
        };
        Ok(serde_json::from_str(source).expect("shipped presets are valid JSON"))
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["cifar10", "cifar100", "eurosat"]
    }
}

/// Check every task invariant; returns the task unchanged when they hold.
pub fn validate_task(task: ClassificationTask) -> Result<ClassificationTask, TaskError> {
    if task.class_labels.is_empty() {
        return Err(TaskError::NoClasses);
    }
    let mut seen = HashSet::with_capacity(task.class_labels.len());
    for (index, label) in task.class_labels.iter().enumerate() {
        let trimmed = label.trim();
        if trimmed.is_empty() {
            return Err(TaskError::EmptyClass { index });
        }
        if !seen.insert(trimmed) {
            return Err(TaskError::DuplicateClass {
                index,
                label: label.clone(),
            });
        }
    }
    let ImageSize { width, height } = task.native_image_size;
    if width < MIN_IMAGE_SIDE {
        return Err(TaskError::InvalidGeometry {
            field: "native_image_size.width",
            value: width,
            min: MIN_IMAGE_SIDE,
        });
    }
    if height < MIN_IMAGE_SIDE {
        return Err(TaskError::InvalidGeometry {
            field: "native_image_size.height",
            value: height,
            min: MIN_IMAGE_SIDE,
        });
    }
    if task.per_class_count == 0 {
        return Err(TaskError::InvalidCount);
    }
    Ok(task)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrickKind {
    BaseClass,
    ClassPrompt,
    MultiDomain,
    RandomGuidance,
    AllCombined,
    BestTricks,
}

impl TrickKind {
    /// The four tricks that expand directly into requests, in the order
    /// `AllCombined` concatenates them.
    pub const ELEMENTARY: [TrickKind; 4] = [
        TrickKind::BaseClass,
        TrickKind::ClassPrompt,
        TrickKind::MultiDomain,
        TrickKind::RandomGuidance,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrickKind::BaseClass => "base_class",
            TrickKind::ClassPrompt => "class_prompt",
            TrickKind::MultiDomain => "multi_domain",
            TrickKind::RandomGuidance => "random_guidance",
            TrickKind::AllCombined => "all_combined",
            TrickKind::BestTricks => "best_tricks",
        }
    }

    pub fn is_elementary(&self) -> bool {
        Self::ELEMENTARY.contains(self)
    }
}

impl fmt::Display for TrickKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrickKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match norm.as_str() {
            "base_class" | "base" => TrickKind::BaseClass,
            "class_prompt" => TrickKind::ClassPrompt,
            "multi_domain" => TrickKind::MultiDomain,
            "random_guidance" => TrickKind::RandomGuidance,
            "all_combined" | "all" => TrickKind::AllCombined,
            "best_tricks" | "best" => TrickKind::BestTricks,
            _ => return Err(TaskError::UnknownTrick(s.to_string())),
        })
    }
}

/// One component of a trick composition: generate `multiplier` times the
/// task's per-class count with this trick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrickWeight {
    pub trick: TrickKind,
    pub multiplier: u32,
}

impl TrickWeight {
    pub const fn new(trick: TrickKind, multiplier: u32) -> Self {
        Self { trick, multiplier }
    }
}

/// Stable textual label for a composition, e.g. `base_class+random_guidance*2`.
pub fn composition_label(parts: &[TrickWeight]) -> String {
    parts
        .iter()
        .map(|p| {
            if p.multiplier == 1 {
                p.trick.as_str().to_string()
            } else {
                format!("{}*{}", p.trick, p.multiplier)
            }
        })
        .collect::<Vec<_>>()
        .join("+")
}

/// Resolve the per-dataset "best tricks" composition.
///
/// Names are matched case-insensitively, first against `registered`
/// (keys compared lowercased), then the shipped presets. Unknown names
/// fall back to `AllCombined` with a logged warning.
pub fn resolve_best_tricks(
    task_name: &str,
    registered: Option<&BTreeMap<String, Vec<TrickWeight>>>,
) -> Vec<TrickWeight> {
    use TrickKind::*;
    let key = task_name.trim().to_ascii_lowercase();
    if let Some(found) = registered.and_then(|reg| {
        reg.iter()
            .find(|(name, _)| name.to_ascii_lowercase() == key)
            .map(|(_, parts)| parts.clone())
    }) {
        return found;
    }
    match key.as_str() {
        "cifar10" => ELEMENTARY_ONCE.to_vec(),
        "cifar100" => vec![
            TrickWeight::new(BaseClass, 1),
            TrickWeight::new(MultiDomain, 1),
            TrickWeight::new(RandomGuidance, 1),
        ],
        "eurosat" => vec![TrickWeight::new(RandomGuidance, 2)],
        _ => {
            log::warn!("no best-trick composition for task {task_name:?}; using all_combined");
            vec![TrickWeight::new(AllCombined, 1)]
        }
    }
}

const ELEMENTARY_ONCE: [TrickWeight; 4] = [
    TrickWeight::new(TrickKind::BaseClass, 1),
    TrickWeight::new(TrickKind::ClassPrompt, 1),
    TrickWeight::new(TrickKind::MultiDomain, 1),
    TrickWeight::new(TrickKind::RandomGuidance, 1),
];

/// Expand any trick (including the composite ones) into elementary
/// components with multipliers.
pub fn composition_for(
    trick: TrickKind,
    task_name: &str,
    registered: Option<&BTreeMap<String, Vec<TrickWeight>>>,
) -> Vec<TrickWeight> {
    match trick {
        TrickKind::AllCombined => ELEMENTARY_ONCE.to_vec(),
        TrickKind::BestTricks => resolve_best_tricks(task_name, registered)
            .into_iter()
            .flat_map(|w| {
                if w.trick == TrickKind::AllCombined {
                    ELEMENTARY_ONCE
                        .iter()
                        .map(|e| TrickWeight::new(e.trick, e.multiplier * w.multiplier))
                        .collect()
                } else {
                    vec![w]
                }
            })
            .collect(),
        t => vec![TrickWeight::new(t, 1)],
    }
}

/// Domains substituted into multi-domain prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCatalog {
    pub style: DomainStyle,
    pub domains: Vec<String>,
}

const GENERIC_DOMAINS: [&str; 10] = [
    "photo",
    "drawing",
    "painting",
    "sketch",
    "collage",
    "poster",
    "digital art image",
    "rock drawing",
    "stick figure",
    "3D rendering",
];

const SATELLITE_DOMAINS: [&str; 5] = [
    "realistic photo",
    "drawing",
    "painting",
    "sketch",
    "3D rendering",
];

impl DomainCatalog {
    pub fn for_style(style: DomainStyle) -> Self {
        let list: &[&str] = match style {
            DomainStyle::GenericObjects => &GENERIC_DOMAINS,
            DomainStyle::Satellite => &SATELLITE_DOMAINS,
        };
        Self {
            style,
            domains: list.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn contains(&self, domain: &str) -> bool {
        self.domains.iter().any(|d| d == domain)
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}
