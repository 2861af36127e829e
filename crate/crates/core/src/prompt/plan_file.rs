//! Plans on disk: JSON Lines, line 0 is `{"header": {...}}`, then one
//! request per line in plan order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::GenerationRequest;

#[derive(Debug, Error)]
pub enum PlanFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanHeader {
    pub task_name: String,
    pub trick_composition: String,
    pub master_seed: u64,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine<T> {
    header: T,
}

pub fn write_plan(
    path: &Path,
    header: &PlanHeader,
    plan: &[GenerationRequest],
) -> Result<(), PlanFileError> {
    let io = |source| PlanFileError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    write_plan_to(&mut out, header, plan).map_err(io)?;
    out.flush().map_err(io)
}

pub(crate) fn write_plan_to<W: Write>(
    out: &mut W,
    header: &PlanHeader,
    plan: &[GenerationRequest],
) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, &HeaderLine { header })?;
    out.write_all(b"\n")?;
    for req in plan {
        serde_json::to_writer(&mut *out, req)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_plan(path: &Path) -> Result<(PlanHeader, Vec<GenerationRequest>), PlanFileError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|source| PlanFileError::Io {
        path: name.clone(),
        source,
    })?;
    let malformed = |line: usize, message: String| PlanFileError::Malformed {
        path: name.clone(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| malformed(1, "empty plan file".into()))?
        .map_err(|source| PlanFileError::Io {
            path: name.clone(),
            source,
        })?;
    let header: HeaderLine<PlanHeader> =
        serde_json::from_str(&first).map_err(|e| malformed(1, e.to_string()))?;
    let mut plan = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|source| PlanFileError::Io {
            path: name.clone(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        plan.push(serde_json::from_str(&line).map_err(|e| malformed(i + 2, e.to_string()))?);
    }
    Ok((header.header, plan))
}
