//! Plan execution with bounded concurrency and checkpointed resume.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{generate, BackendError, ImageBackend, ImageRecord};
use crate::prompt::GenerationRequest;

pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.005;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("plan aborted: {} of {total} requests failed (threshold {threshold}); failed ids {failed_ids:?}", failed_ids.len())]
    PlanAborted {
        failed_ids: Vec<u64>,
        total: usize,
        threshold: f64,
    },
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sink rejected record {request_id}: {message}")]
    Sink { request_id: u64, message: String },
}

/// Receives finished records, on the coordinating thread only.
pub trait RecordSink {
    fn accept(&mut self, record: ImageRecord) -> Result<(), String>;
}

impl<F> RecordSink for F
where
    F: FnMut(ImageRecord) -> Result<(), String>,
{
    fn accept(&mut self, record: ImageRecord) -> Result<(), String> {
        self(record)
    }
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<ImageRecord>,
}

impl RecordSink for MemorySink {
    fn accept(&mut self, record: ImageRecord) -> Result<(), String> {
        self.records.push(record);
        Ok(())
    }
}

/// Provenance of a staged image, one JSON line per record in
/// `records.jsonl` next to the PNGs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedRecord {
    pub request_id: u64,
    pub backend_fingerprint: String,
    pub wall_time: f64,
}

/// Stages full-resolution images as `{dir}/{request_id}.png`.
#[derive(Debug)]
pub struct DirectorySink {
    dir: PathBuf,
    log: File,
}

impl DirectorySink {
    pub const LOG_NAME: &'static str = "records.jsonl";

    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(Self::LOG_NAME))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
        })
    }

    pub fn image_path(dir: &Path, request_id: u64) -> PathBuf {
        dir.join(format!("{request_id}.png"))
    }

    fn write(&mut self, record: &ImageRecord) -> Result<(), Box<dyn std::error::Error>> {
        let path = Self::image_path(&self.dir, record.request_id);
        let tmp = path.with_extension("png.partial");
        record.pixels.save_with_format(&tmp, image::ImageFormat::Png)?;
        fs::rename(&tmp, &path)?;
        let line = serde_json::to_string(&StagedRecord {
            request_id: record.request_id,
            backend_fingerprint: record.backend_fingerprint.clone(),
            wall_time: record.wall_time,
        })?;
        writeln!(self.log, "{line}")?;
        Ok(())
    }
}

impl RecordSink for DirectorySink {
    fn accept(&mut self, record: ImageRecord) -> Result<(), String> {
        self.write(&record).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub max_in_flight: usize,
    /// Newline-delimited completed request ids; created if missing.
    pub checkpoint: Option<PathBuf>,
    /// Abort once more than this fraction of the plan has failed.
    pub failure_threshold: f64,
    /// Completed ids buffered between checkpoint syncs.
    pub checkpoint_batch: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 4,
            checkpoint: None,
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            checkpoint_batch: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub generated: usize,
    pub skipped: usize,
    pub failed: Vec<(u64, BackendError)>,
}

pub fn read_checkpoint(path: &Path) -> std::io::Result<BTreeSet<u64>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeSet::new()),
        Err(e) => return Err(e),
    };
    let mut done = BTreeSet::new();
    for line in BufReader::new(file).lines() {
        // A torn final line from a crash is ignored.
        if let Ok(id) = line?.trim().parse() {
            done.insert(id);
        }
    }
    Ok(done)
}

struct Checkpoint {
    path: PathBuf,
    file: File,
    pending: Vec<u64>,
    batch: usize,
}

impl Checkpoint {
    fn open(path: &Path, batch: usize) -> std::io::Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            pending: Vec::new(),
            batch: batch.max(1),
        })
    }

    fn push(&mut self, id: u64) -> std::io::Result<()> {
        self.pending.push(id);
        if self.pending.len() >= self.batch {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let mut buf = String::new();
        for id in self.pending.drain(..) {
            buf.push_str(&id.to_string());
            buf.push('\n');
        }
        self.file.write_all(buf.as_bytes())?;
        self.file.sync_data()
    }
}

/// Run every request of `plan` not already in the checkpoint.
///
/// At most `max_in_flight` backend calls run at once. Records reach `sink`
/// on the calling thread in completion order and are checkpointed only
/// after the sink accepted them. Failed requests are collected; once the
/// failed fraction of the whole plan exceeds the threshold no new requests
/// are dispatched and the run ends with [`RunError::PlanAborted`].
pub fn generate_plan(
    plan: &[GenerationRequest],
    backend: &dyn ImageBackend,
    sink: &mut dyn RecordSink,
    options: &RunOptions,
) -> Result<RunSummary, RunError> {
    let ckpt_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| RunError::Checkpoint {
            path: path.clone(),
            source,
        }
    };
    let (done, mut checkpoint) = match &options.checkpoint {
        Some(path) => (
            read_checkpoint(path).map_err(ckpt_err(path))?,
            Some(Checkpoint::open(path, options.checkpoint_batch).map_err(ckpt_err(path))?),
        ),
        None => (BTreeSet::new(), None),
    };

    let mut seen = HashSet::new();
    let pending: Vec<&GenerationRequest> = plan
        .iter()
        .filter(|r| !done.contains(&r.request_id) && seen.insert(r.request_id))
        .collect();
    let mut summary = RunSummary {
        skipped: plan.len() - pending.len(),
        ..Default::default()
    };
    let total = plan.len();
    let workers = options.max_in_flight.max(1).min(pending.len().max(1));

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let mut outcome: Result<(), RunError> = Ok(());

    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(u64, Result<ImageRecord, BackendError>)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, pending) = (&next, &stop, &pending);
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(req) = pending.get(i) else { break };
                if tx.send((req.request_id, generate(req, backend))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        for (id, result) in rx {
            if outcome.is_err() {
                continue;
            }
            match result {
                Ok(record) => {
                    if let Err(message) = sink.accept(record) {
                        stop.store(true, Ordering::Relaxed);
                        outcome = Err(RunError::Sink {
                            request_id: id,
                            message,
                        });
                        continue;
                    }
                    summary.generated += 1;
                    if let Some(c) = checkpoint.as_mut() {
                        if let Err(e) = c.push(id) {
                            stop.store(true, Ordering::Relaxed);
                            outcome = Err(ckpt_err(&c.path)(e));
                        }
                    }
                }
                Err(e) => {
                    log::warn!("request {id} failed: {e}");
                    summary.failed.push((id, e));
                    if summary.failed.len() as f64 > options.failure_threshold * total as f64 {
                        stop.store(true, Ordering::Relaxed);
                    }
                }
            }
        }
    });

    if let Some(c) = checkpoint.as_mut() {
        c.flush().map_err(ckpt_err(&c.path))?;
    }
    outcome?;
    if summary.failed.len() as f64 > options.failure_threshold * total as f64 {
        let mut failed_ids: Vec<u64> = summary.failed.iter().map(|(id, _)| *id).collect();
        failed_ids.sort_unstable();
        return Err(RunError::PlanAborted {
            failed_ids,
            total,
            threshold: options.failure_threshold,
        });
    }
    Ok(summary)
}
