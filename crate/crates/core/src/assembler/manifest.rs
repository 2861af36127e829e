//! The dataset manifest: JSON Lines, UTF-8, LF endings. Line 0 is
//! `{"header": {...}}`; every following line is one [`ManifestEntry`],
//! sorted by `(class_index, request_id)`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;
use crate::task::{ImageSize, TrickKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedCount {
    pub class_label: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub task_name: String,
    pub trick_composition: String,
    pub backend_fingerprint: String,
    pub master_seed: u64,
    pub tool_version: String,
    pub anti_alias: bool,
    pub native_size: ImageSize,
    /// Planned image count per class, indexed by class index.
    pub planned_counts: Vec<PlannedCount>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub request_id: u64,
    pub class_index: usize,
    pub class_label: String,
    pub trick: TrickKind,
    pub prompt: String,
    pub seed: u64,
    pub guidance_scale: f64,
    pub domain: Option<String>,
    /// Relative to the manifest's directory.
    pub file_path: String,
    /// SHA-256 of the stored PNG bytes, lowercase hex.
    pub content_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ManifestHeader,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

impl DatasetManifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&HeaderLine {
            header: self.header.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, (usize, String)> {
        let mut lines = text.split('\n').enumerate();
        let (_, first) = lines.next().ok_or((1, "empty manifest".to_string()))?;
        let header: HeaderLine = serde_json::from_str(first).map_err(|e| (1, e.to_string()))?;
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| (i + 1, e.to_string()))?);
        }
        Ok(Self {
            header: header.header,
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|(line, msg)| format!("{}:{line}: {msg}", path.display()))
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// Digest of the serialized manifest; binds trained models to data.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn class_labels(&self) -> Vec<String> {
        self.header
            .planned_counts
            .iter()
            .map(|c| c.class_label.clone())
            .collect()
    }

    /// Entries belonging to one trick, for per-trick ablations.
    pub fn entries_for(&self, trick: TrickKind) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.trick == trick)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
    }
    fs::rename(&tmp, path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Unreadable { message: String },
    MissingFile { path: String },
    DigestMismatch { path: String, expected: String, actual: String },
    DuplicatePath { path: String },
    Unsorted { line: usize },
    UnknownClass { line: usize, class_index: usize },
    ClassLabelMismatch { line: usize, expected: String, found: String },
    ClassCountMismatch { class_label: String, expected: usize, found: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Unreadable { message } => write!(f, "unreadable manifest: {message}"),
            Violation::MissingFile { path } => write!(f, "missing file {path}"),
            Violation::DigestMismatch { path, expected, actual } => {
                write!(f, "digest mismatch for {path}: manifest {expected}, file {actual}")
            }
            Violation::DuplicatePath { path } => write!(f, "duplicate path {path}"),
            Violation::Unsorted { line } => write!(f, "line {line}: entries out of order"),
            Violation::UnknownClass { line, class_index } => {
                write!(f, "line {line}: class index {class_index} not in header")
            }
            Violation::ClassLabelMismatch { line, expected, found } => {
                write!(f, "line {line}: class label {found:?}, header says {expected:?}")
            }
            Violation::ClassCountMismatch { class_label, expected, found } => {
                write!(f, "class {class_label:?}: {found} entries, {expected} planned")
            }
        }
    }
}

/// Result of re-checking a dataset on disk; valid iff `violations` is empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub manifest: String,
    pub entries_checked: usize,
    pub violations: Vec<Violation>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Re-hash every referenced file, recount classes and re-check ordering.
/// Problems are reported, never raised.
pub fn verify_manifest(manifest_path: &Path) -> VerifyReport {
    let mut report = VerifyReport {
        manifest: manifest_path.display().to_string(),
        ..Default::default()
    };
    let manifest = match DatasetManifest::read(manifest_path) {
        Ok(m) => m,
        Err(message) => {
            report.violations.push(Violation::Unreadable { message });
            return report;
        }
    };
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let planned = &manifest.header.planned_counts;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut paths = HashSet::new();
    let mut prev: Option<(usize, u64)> = None;
    for (i, e) in manifest.entries.iter().enumerate() {
        let line = i + 2;
        report.entries_checked += 1;
        let key = (e.class_index, e.request_id);
        if prev.is_some_and(|p| p >= key) {
            report.violations.push(Violation::Unsorted { line });
        }
        prev = Some(key);
        match planned.get(e.class_index) {
            None => report.violations.push(Violation::UnknownClass {
                line,
                class_index: e.class_index,
            }),
            Some(p) if p.class_label != e.class_label => {
                report.violations.push(Violation::ClassLabelMismatch {
                    line,
                    expected: p.class_label.clone(),
                    found: e.class_label.clone(),
                })
            }
            Some(_) => {}
        }
        *counts.entry(e.class_index).or_default() += 1;
        if !paths.insert(e.file_path.as_str()) {
            report.violations.push(Violation::DuplicatePath {
                path: e.file_path.clone(),
            });
        }
        match fs::read(root.join(&e.file_path)) {
            Ok(bytes) => {
                let actual = sha256_hex(&bytes);
                if actual != e.content_digest {
                    report.violations.push(Violation::DigestMismatch {
                        path: e.file_path.clone(),
                        expected: e.content_digest.clone(),
                        actual,
                    });
                }
            }
            Err(_) => report.violations.push(Violation::MissingFile {
                path: e.file_path.clone(),
            }),
        }
    }
    for (idx, p) in planned.iter().enumerate() {
        let found = counts.get(&idx).copied().unwrap_or(0);
        if found != p.count {
            report.violations.push(Violation::ClassCountMismatch {
                class_label: p.class_label.clone(),
                expected: p.count,
                found,
            });
        }
    }
    report
}
