//! Turns generated images into a training-ready dataset.
//!
//! Images are rescaled to the task's native size, written as PNG under
//! `{root}/{class_label}/{request_id}.png`, and listed in a hash-verifiable
//! manifest at `{root}/manifest.jsonl`. Entries are sorted before anything
//! is written, so the output bytes do not depend on the order records
//! arrived in.

mod manifest;
mod rescale;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Cursor};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use image::RgbImage;
use thiserror::Error;

use crate::backend::{DirectorySink, ImageRecord, StagedRecord};
use crate::hashing::sha256_hex;
use crate::prompt::GenerationRequest;
use crate::task::ClassificationTask;

pub use manifest::{
    verify_manifest, DatasetManifest, ManifestEntry, ManifestHeader, PlannedCount, VerifyReport,
    Violation, MANIFEST_NAME,
};
pub(crate) use manifest::write_atomic;
pub use rescale::{rescale, rescale_with, RescaleError, ResampleFilter};

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error("{} planned requests have no record: {ids:?}", ids.len())]
    MissingRecords { ids: Vec<u64> },
    #[error("record {0} appears more than once")]
    DuplicateRecord(u64),
    #[error("{records} records for {planned} planned requests; unplanned ids {unplanned:?}")]
    CountMismatch {
        planned: usize,
        records: usize,
        unplanned: Vec<u64>,
    },
    #[error("request {request_id}: class {class_label:?} at index {class_index} does not match the task")]
    PlanTaskMismatch {
        request_id: u64,
        class_index: usize,
        class_label: String,
    },
    #[error("class label {0:?} cannot be used as a directory name")]
    UnsafeClassLabel(String),
    #[error("request {request_id}: {source}")]
    Rescale {
        request_id: u64,
        #[source]
        source: RescaleError,
    },
    #[error("record {request_id}: {message}")]
    Load { request_id: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Where [`assemble`] gets full-resolution records from.
pub trait RecordSource: Sync {
    /// Every available record id, duplicates included.
    fn ids(&self) -> Result<Vec<u64>, AssembleError>;
    fn load(&self, request_id: u64) -> Result<ImageRecord, AssembleError>;
}

/// Records held in memory.
pub struct InMemoryRecords {
    ids: Vec<u64>,
    by_id: HashMap<u64, ImageRecord>,
}

impl InMemoryRecords {
    pub fn new(records: Vec<ImageRecord>) -> Self {
        let ids = records.iter().map(|r| r.request_id).collect();
        let by_id = records.into_iter().map(|r| (r.request_id, r)).collect();
        Self { ids, by_id }
    }
}

impl RecordSource for InMemoryRecords {
    fn ids(&self) -> Result<Vec<u64>, AssembleError> {
        Ok(self.ids.clone())
    }

    fn load(&self, request_id: u64) -> Result<ImageRecord, AssembleError> {
        self.by_id
            .get(&request_id)
            .cloned()
            .ok_or(AssembleError::Load {
                request_id,
                message: "not in memory".into(),
            })
    }
}

/// Records staged on disk by [`DirectorySink`].
pub struct StagingDir {
    dir: PathBuf,
    staged: BTreeMap<u64, StagedRecord>,
}

impl StagingDir {
    pub fn open(dir: &Path) -> Result<Self, AssembleError> {
        let log = dir.join(DirectorySink::LOG_NAME);
        let io = |source| AssembleError::Io {
            path: log.display().to_string(),
            source,
        };
        let mut staged = BTreeMap::new();
        match File::open(&log) {
            Ok(f) => {
                for line in BufReader::new(f).lines() {
                    let line = line.map_err(io)?;
                    // A record finished but interrupted mid-log is regenerated
                    // on resume; the last line per id wins.
                    if let Ok(rec) = serde_json::from_str::<StagedRecord>(&line) {
                        staged.insert(rec.request_id, rec);
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io(e)),
        }
        staged.retain(|id, _| DirectorySink::image_path(dir, *id).exists());
        Ok(Self {
            dir: dir.to_path_buf(),
            staged,
        })
    }
}

impl RecordSource for StagingDir {
    fn ids(&self) -> Result<Vec<u64>, AssembleError> {
        Ok(self.staged.keys().copied().collect())
    }

    fn load(&self, request_id: u64) -> Result<ImageRecord, AssembleError> {
        let meta = self.staged.get(&request_id).ok_or(AssembleError::Load {
            request_id,
            message: "not staged".into(),
        })?;
        let path = DirectorySink::image_path(&self.dir, request_id);
        let pixels = image::open(&path)
            .map_err(|e| AssembleError::Load {
                request_id,
                message: format!("{}: {e}", path.display()),
            })?
            .to_rgb8();
        Ok(ImageRecord {
            request_id,
            pixels,
            backend_fingerprint: meta.backend_fingerprint.clone(),
            wall_time: meta.wall_time,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AssembleOptions {
    pub root: PathBuf,
    pub filter: ResampleFilter,
    pub master_seed: u64,
    pub trick_composition: String,
    pub config_digest: Option<String>,
    pub workers: usize,
}

impl AssembleOptions {
    pub fn new(root: impl Into<PathBuf>, anti_alias: bool) -> Self {
        Self {
            root: root.into(),
            filter: ResampleFilter::from_anti_alias(anti_alias),
            master_seed: 0,
            trick_composition: String::new(),
            config_digest: None,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

fn check_label(label: &str) -> Result<(), AssembleError> {
    let bad = label.is_empty()
        || label == "."
        || label == ".."
        || label.chars().any(|c| c == '/' || c == '\\' || c.is_control());
    if bad {
        Err(AssembleError::UnsafeClassLabel(label.to_string()))
    } else {
        Ok(())
    }
}

/// Check that `ids` covers the plan exactly once.
pub fn check_completeness(
    plan: &[GenerationRequest],
    ids: &[u64],
) -> Result<(), AssembleError> {
    let mut seen = BTreeSet::new();
    for &id in ids {
        if !seen.insert(id) {
            return Err(AssembleError::DuplicateRecord(id));
        }
    }
    let planned: BTreeSet<u64> = plan.iter().map(|r| r.request_id).collect();
    let missing: Vec<u64> = planned.difference(&seen).copied().collect();
    if !missing.is_empty() {
        return Err(AssembleError::MissingRecords { ids: missing });
    }
    let unplanned: Vec<u64> = seen.difference(&planned).copied().collect();
    if !unplanned.is_empty() || planned.len() != plan.len() {
        return Err(AssembleError::CountMismatch {
            planned: plan.len(),
            records: ids.len(),
            unplanned,
        });
    }
    Ok(())
}

/// Build the dataset for `plan` under `options.root` and write its manifest.
pub fn assemble(
    plan: &[GenerationRequest],
    records: &dyn RecordSource,
    task: &ClassificationTask,
    options: &AssembleOptions,
) -> Result<DatasetManifest, AssembleError> {
    for label in &task.class_labels {
        check_label(label)?;
    }
    for r in plan {
        if task.class_labels.get(r.class_index) != Some(&r.class_label) {
            return Err(AssembleError::PlanTaskMismatch {
                request_id: r.request_id,
                class_index: r.class_index,
                class_label: r.class_label.clone(),
            });
        }
    }
    check_completeness(plan, &records.ids()?)?;

    let mut order: Vec<&GenerationRequest> = plan.iter().collect();
    order.sort_by_key(|r| (r.class_index, r.request_id));

    let target = task.native_image_size;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<(String, String)>>> = Mutex::new(vec![None; order.len()]);
    let failure: Mutex<Option<AssembleError>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..options.workers.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= order.len() || failure.lock().unwrap().is_some() {
                    break;
                }
                let req = order[i];
                match store_one(req, records, target, options) {
                    Ok(out) => results.lock().unwrap()[i] = Some(out),
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }

    let mut fingerprints = BTreeSet::new();
    let mut entries = Vec::with_capacity(order.len());
    for (req, out) in order.iter().zip(results.into_inner().unwrap()) {
        let (digest, fingerprint) = out.expect("every slot filled when no worker failed");
        fingerprints.insert(fingerprint);
        entries.push(ManifestEntry {
            request_id: req.request_id,
            class_index: req.class_index,
            class_label: req.class_label.clone(),
            trick: req.trick,
            prompt: req.prompt.clone(),
            seed: req.seed,
            guidance_scale: req.guidance_scale,
            domain: req.domain.clone(),
            file_path: relative_image_path(&req.class_label, req.request_id),
            content_digest: digest,
        });
    }

    let mut planned_counts: Vec<PlannedCount> = task
        .class_labels
        .iter()
        .map(|l| PlannedCount {
            class_label: l.clone(),
            count: 0,
        })
        .collect();
    for r in plan {
        planned_counts[r.class_index].count += 1;
    }

    let manifest = DatasetManifest {
        header: ManifestHeader {
            task_name: task.name.clone(),
            trick_composition: options.trick_composition.clone(),
            backend_fingerprint: fingerprints.into_iter().collect::<Vec<_>>().join(";"),
            master_seed: options.master_seed,
            tool_version: crate::TOOL_VERSION.to_string(),
            anti_alias: options.filter.is_anti_aliased(),
            native_size: target,
            planned_counts,
            config_digest: options.config_digest.clone(),
        },
        entries,
    };
    let path = options.root.join(MANIFEST_NAME);
    manifest.write(&path).map_err(|source| AssembleError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(manifest)
}

pub fn relative_image_path(class_label: &str, request_id: u64) -> String {
    format!("{class_label}/{request_id}.png")
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory PNG encoding does not fail");
    buf.into_inner()
}

fn store_one(
    req: &GenerationRequest,
    records: &dyn RecordSource,
    target: crate::task::ImageSize,
    options: &AssembleOptions,
) -> Result<(String, String), AssembleError> {
    let record = records.load(req.request_id)?;
    let small = rescale_with(&record.pixels, target, options.filter).map_err(|source| {
        AssembleError::Rescale {
            request_id: req.request_id,
            source,
        }
    })?;
    let bytes = encode_png(&small);
    let digest = sha256_hex(&bytes);
    let path = options
        .root
        .join(relative_image_path(&req.class_label, req.request_id));
    let unchanged = fs::read(&path).is_ok_and(|existing| existing == bytes);
    if !unchanged {
        write_atomic(&path, &bytes).map_err(|source| AssembleError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok((digest, record.backend_fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MemorySink, MockBackend, generate_plan, RunOptions};
    use crate::prompt::{expand, ExpandOptions, PlanRng};
    use crate::task::{DomainStyle, ImageSize, TrickKind};

    fn toy() -> (ClassificationTask, Vec<GenerationRequest>, Vec<ImageRecord>) {
        let task = ClassificationTask {
            name: "toy".into(),
            class_labels: vec!["cat".into(), "dog".into()],
            native_image_size: ImageSize::square(8),
            per_class_count: 3,
            test_set_ref: None,
            style: DomainStyle::GenericObjects,
        };
        let opts = ExpandOptions {
            generation_width: 32,
            generation_height: 32,
            ..Default::default()
        };
        let plan = expand(&task, TrickKind::BaseClass, &PlanRng::new(0, "toy", TrickKind::BaseClass), &opts).unwrap();
        let mut sink = MemorySink::default();
        generate_plan(&plan, &MockBackend::new("m"), &mut sink, &RunOptions::default()).unwrap();
        (task, plan, sink.records)
    }

    #[test]
    fn missing_record_is_named() {
        let (task, plan, mut records) = toy();
        records.retain(|r| r.request_id != 4);
        let dir = tempfile::tempdir().unwrap();
        let err = assemble(&plan, &InMemoryRecords::new(records), &task, &AssembleOptions::new(dir.path(), true)).unwrap_err();
        assert!(matches!(err, AssembleError::MissingRecords { ref ids } if ids == &[4]));
    }

    #[test]
    fn duplicate_record_is_rejected() {
        assert!(matches!(check_completeness(&toy().1, &[0, 1, 1, 2, 3, 4, 5]), Err(AssembleError::DuplicateRecord(1))));
    }

    #[test]
    fn unplanned_record_is_a_count_mismatch() {
        let ids: Vec<u64> = (0..7).collect();
        assert!(matches!(check_completeness(&toy().1, &ids), Err(AssembleError::CountMismatch { .. })));
    }

    #[test]
    fn unsafe_labels_rejected() {
        for bad in ["a/b", "..", "x\\y"] {
            assert!(check_label(bad).is_err(), "{bad}");
        }
        assert!(check_label("Sea Lake").is_ok());
    }

    #[test]
    fn manifest_is_sorted_and_verifies() {
        let (task, plan, records) = toy();
        let dir = tempfile::tempdir().unwrap();
        let m = assemble(&plan, &InMemoryRecords::new(records), &task, &AssembleOptions::new(dir.path(), true)).unwrap();
        assert_eq!(m.entries.len(), 6);
        assert!(m.entries.windows(2).all(|w| (w[0].class_index, w[0].request_id) < (w[1].class_index, w[1].request_id)));
        assert_eq!(m.header.backend_fingerprint, "deterministic_mock:m:v1");
        let report = verify_manifest(&dir.path().join(MANIFEST_NAME));
        assert!(report.is_clean(), "{:?}", report.violations);
        let img = image::open(dir.path().join("dog/3.png")).unwrap();
        assert_eq!((img.width(), img.height()), (8, 8));
    }

    #[test]
    fn staging_dir_round_trip() {
        let (task, plan, records) = toy();
        let stage = tempfile::tempdir().unwrap();
        let mut sink = DirectorySink::open(stage.path()).unwrap();
        for r in records.iter().cloned() {
            crate::backend::RecordSink::accept(&mut sink, r).unwrap();
        }
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let from_disk = assemble(&plan, &StagingDir::open(stage.path()).unwrap(), &task, &AssembleOptions::new(a.path(), false)).unwrap();
        let from_mem = assemble(&plan, &InMemoryRecords::new(records), &task, &AssembleOptions::new(b.path(), false)).unwrap();
        assert_eq!(from_disk.to_jsonl(), from_mem.to_jsonl());
    }
}
