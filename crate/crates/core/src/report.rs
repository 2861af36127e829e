//! Result tables: measured accuracies, published reference rows, and signed
//! deltas against each architecture's base-class run.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::EvalResult;

/// Composition label of the baseline every delta is measured against.
pub const BASELINE_COMPOSITION: &str = "base_class";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no measured {BASELINE_COMPOSITION} row for {dataset}/{architecture}")]
    MissingBaseline {
        dataset: String,
        architecture: String,
    },
    #[error("reference row {dataset}/{architecture}/{composition} already exists with a different value")]
    ReferenceImmutable {
        dataset: String,
        architecture: String,
        composition: String,
    },
    #[error("malformed ledger: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSource {
    Measured,
    /// Published by someone else under their own protocol; shown, never
    /// used as a baseline.
    Reference,
}

impl RowSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            RowSource::Measured => "measured",
            RowSource::Reference => "reference",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub architecture: String,
    pub composition: String,
    /// Top-1 accuracy in percent.
    pub top1: f64,
    pub source: RowSource,
}

impl ResultRow {
    pub fn measured(dataset: &str, architecture: &str, composition: &str, top1: f64) -> Self {
        Self {
            dataset: dataset.into(),
            architecture: architecture.into(),
            composition: composition.into(),
            top1,
            source: RowSource::Measured,
        }
    }

    pub fn from_eval(eval: &EvalResult) -> Self {
        Self::measured(
            &eval.task,
            &eval.architecture,
            &eval.trick_composition,
            eval.top1_accuracy * 100.0,
        )
    }

    fn key(&self) -> (&str, &str, &str, RowSource) {
        (&self.dataset, &self.architecture, &self.composition, self.source)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultLedger {
    pub rows: Vec<ResultRow>,
}

/// Zero-shot CLIP and a prior synthetic-data baseline, as published.
pub fn reference_rows() -> Vec<ResultRow> {
    let r = |dataset: &str, architecture: &str, top1| ResultRow {
        dataset: dataset.into(),
        architecture: architecture.into(),
        composition: "reference".into(),
        top1,
        source: RowSource::Reference,
    };
    vec![
        r("cifar10", "clip_resnet50", 75.6),
        r("cifar100", "clip_resnet50", 41.6),
        r("eurosat", "clip_resnet50", 41.1),
        r("cifar100", "he_et_al_resnet50", 28.74),
    ]
}

impl ResultLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_references() -> Self {
        let mut ledger = Self::new();
        for row in reference_rows() {
            ledger.add_reference(row).expect("reference rows are distinct");
        }
        ledger
    }

    /// Insert or replace the measured row for (dataset, architecture,
    /// composition). Returns the replaced row.
    pub fn record(&mut self, mut row: ResultRow) -> Option<ResultRow> {
        row.source = RowSource::Measured;
        match self.rows.iter_mut().find(|r| r.key() == row.key()) {
            Some(existing) => Some(std::mem::replace(existing, row)),
            None => {
                self.rows.push(row);
                None
            }
        }
    }

    pub fn add_reference(&mut self, mut row: ResultRow) -> Result<(), ReportError> {
        row.source = RowSource::Reference;
        match self.rows.iter().find(|r| r.key() == row.key()) {
            Some(existing) if existing.top1 == row.top1 => Ok(()),
            Some(_) => Err(ReportError::ReferenceImmutable {
                dataset: row.dataset,
                architecture: row.architecture,
                composition: row.composition,
            }),
            None => {
                self.rows.push(row);
                Ok(())
            }
        }
    }

    pub fn baseline(&self, dataset: &str, architecture: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| {
            r.source == RowSource::Measured
                && r.dataset == dataset
                && r.architecture == architecture
                && r.composition == BASELINE_COMPOSITION
        })
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        match std::fs::read_to_string(path) {
            Ok(text) => parse(Format::Json, &text),
            Err(source) => Err(ReportError::Io {
                path: path.display().to_string(),
                source,
            }),
        }
    }

    /// Like [`ResultLedger::load`] but a missing file gives the preloaded
    /// reference ledger.
    pub fn load_or_default(path: &Path) -> Result<Self, ReportError> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::with_references())
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ReportError> {
        crate::assembler::write_atomic(path, emit(self, Format::Json).as_bytes()).map_err(|source| {
            ReportError::Io {
                path: path.display().to_string(),
                source,
            }
        })
    }
}

/// Signed change of `a` relative to `b`, in percentage points.
pub fn delta(a: f64, b: f64) -> f64 {
    a - b
}

/// Two decimals, a typographic minus and an arrow; a zero delta has no arrow.
pub fn format_delta(d: f64) -> String {
    let hundredths = (d * 100.0).round();
    if hundredths == 0.0 {
        return "+0.00".into();
    }
    let mag = format!("{:.2}", hundredths.abs() / 100.0);
    if hundredths > 0.0 {
        format!("+{mag} \u{2191}")
    } else {
        format!("\u{2212}{mag} \u{2193}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub architecture: String,
    pub composition: String,
    pub top1: f64,
    /// None for reference rows.
    pub delta: Option<f64>,
    pub source: RowSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTable {
    pub dataset: String,
    pub rows: Vec<DeltaRow>,
}

impl DeltaTable {
    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {}\n\n", self.dataset);
        out.push_str("| Architecture | Composition | Top-1 (%) | Change | Source |\n");
        out.push_str("|---|---|---:|---|---|\n");
        for r in &self.rows {
            let change = r.delta.map(format_delta).unwrap_or_default();
            let _ = writeln!(
                out,
                "| {} | {} | {:.2} | {} | {} |",
                r.architecture,
                r.composition,
                r.top1,
                change,
                r.source.as_str()
            );
        }
        out
    }
}

/// Every row for `dataset`, measured rows carrying their delta against the
/// same architecture's base-class row.
pub fn delta_table(ledger: &ResultLedger, dataset: &str) -> Result<DeltaTable, ReportError> {
    let mut rows = Vec::new();
    for r in ledger.rows.iter().filter(|r| r.dataset == dataset) {
        let delta = match r.source {
            RowSource::Reference => None,
            RowSource::Measured => {
                let base = ledger.baseline(dataset, &r.architecture).ok_or_else(|| {
                    ReportError::MissingBaseline {
                        dataset: dataset.into(),
                        architecture: r.architecture.clone(),
                    }
                })?;
                Some(delta(r.top1, base.top1))
            }
        };
        rows.push(DeltaRow {
            architecture: r.architecture.clone(),
            composition: r.composition.clone(),
            top1: r.top1,
            delta,
            source: r.source,
        });
    }
    Ok(DeltaTable {
        dataset: dataset.into(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format {other:?}; expected markdown, csv or json")),
        }
    }
}

pub const CSV_HEADER: [&str; 6] = ["dataset", "architecture", "composition", "top1", "delta", "source"];

fn datasets(ledger: &ResultLedger) -> Vec<&str> {
    let mut seen: Vec<&str> = Vec::new();
    for r in &ledger.rows {
        if !seen.contains(&r.dataset.as_str()) {
            seen.push(&r.dataset);
        }
    }
    seen
}

/// Render the whole ledger. Deltas that cannot be computed are left blank.
pub fn emit(ledger: &ResultLedger, format: Format) -> String {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(ledger).expect("ledger serializes");
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).expect("in-memory csv");
            for r in &ledger.rows {
                let d = match r.source {
                    RowSource::Measured => ledger
                        .baseline(&r.dataset, &r.architecture)
                        .map(|b| format!("{:.2}", delta(r.top1, b.top1)))
                        .unwrap_or_default(),
                    RowSource::Reference => String::new(),
                };
                w.write_record([
                    r.dataset.as_str(),
                    &r.architecture,
                    &r.composition,
                    &r.top1.to_string(),
                    &d,
                    r.source.as_str(),
                ])
                .expect("in-memory csv");
            }
            String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 fields")
        }
        Format::Markdown => {
            let mut out = String::from("# Top-1 accuracy\n");
            for ds in datasets(ledger) {
                out.push('\n');
                let table = delta_table(ledger, ds).unwrap_or_else(|_| DeltaTable {
                    dataset: ds.into(),
                    rows: ledger
                        .rows
                        .iter()
                        .filter(|r| r.dataset == ds)
                        .map(|r| DeltaRow {
                            architecture: r.architecture.clone(),
                            composition: r.composition.clone(),
                            top1: r.top1,
                            delta: ledger.baseline(ds, &r.architecture).filter(|_| r.source == RowSource::Measured).map(|b| delta(r.top1, b.top1)),
                            source: r.source,
                        })
                        .collect(),
                });
                out.push_str(&table.to_markdown());
            }
            out
        }
    }
}

/// Inverse of [`emit`] for csv and json. The csv delta column is derived
/// and ignored on input.
pub fn parse(format: Format, text: &str) -> Result<ResultLedger, ReportError> {
    match format {
        Format::Json => serde_json::from_str(text).map_err(|e| ReportError::Malformed(e.to_string())),
        Format::Csv => {
            let mut reader = csv::Reader::from_reader(text.as_bytes());
            let header = reader
                .headers()
                .map_err(|e| ReportError::Malformed(e.to_string()))?;
            if header.iter().ne(CSV_HEADER) {
                return Err(ReportError::Malformed(format!("unexpected csv header {header:?}")));
            }
            let mut rows = Vec::new();
            for (i, rec) in reader.records().enumerate() {
                let rec = rec.map_err(|e| ReportError::Malformed(e.to_string()))?;
                let bad = |what: &str| ReportError::Malformed(format!("row {}: bad {what}", i + 1));
                let top1 = rec[3].parse().map_err(|_| bad("top1"))?;
                let source = match &rec[5] {
                    "measured" => RowSource::Measured,
                    "reference" => RowSource::Reference,
                    _ => return Err(bad("source")),
                };
                rows.push(ResultRow {
                    dataset: rec[0].into(),
                    architecture: rec[1].into(),
                    composition: rec[2].into(),
                    top1,
                    source,
                });
            }
            Ok(ResultLedger { rows })
        }
        Format::Markdown => Err(ReportError::Malformed("markdown is output only".into())),
    }
}
