use std::fmt::Write as _;
use std::path::Path;

use candle_core::D;
use serde::{Deserialize, Serialize};

use super::artifact::TrainedModel;
use super::data::LabeledImages;
use super::train::EpochStats;
use super::HarnessError;

const EVAL_BATCH: usize = 256;

/// Anything that maps images to class indices.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn predict(&self, data: &LabeledImages, indices: &[usize]) -> Result<Vec<usize>, HarnessError>;

    /// Penultimate-layer activations, one row per index.
    fn features(&self, _data: &LabeledImages, _indices: &[usize]) -> Result<Vec<Vec<f32>>, HarnessError> {
        Err(HarnessError::FeatureHookUnavailable)
    }
    fn architecture(&self) -> String {
        "custom".into()
    }
    fn trick_composition(&self) -> String {
        String::new()
    }
    fn history(&self) -> Vec<EpochStats> {
        Vec::new()
    }
}

impl Classifier for TrainedModel {
    fn num_classes(&self) -> usize {
        self.meta.class_labels.len()
    }

    fn predict(&self, data: &LabeledImages, indices: &[usize]) -> Result<Vec<usize>, HarnessError> {
        let mut out = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EVAL_BATCH) {
            let x = data.batch(chunk, None, &self.device)?;
            let pred: Vec<u32> = self.net.forward(&x, false)?.argmax(D::Minus1)?.to_vec1()?;
            out.extend(pred.into_iter().map(|p| p as usize));
        }
        Ok(out)
    }

    fn features(&self, data: &LabeledImages, indices: &[usize]) -> Result<Vec<Vec<f32>>, HarnessError> {
        let mut out = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EVAL_BATCH) {
            let x = data.batch(chunk, None, &self.device)?;
            out.extend(self.net.features(&x, false)?.to_vec2::<f32>()?);
        }
        Ok(out)
    }

    fn architecture(&self) -> String {
        self.meta.architecture.to_string()
    }

    fn trick_composition(&self) -> String {
        self.meta.trick_composition.clone()
    }

    fn history(&self) -> Vec<EpochStats> {
        self.meta.history.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: String,
    pub trick_composition: String,
    pub architecture: String,
    /// In [0, 1].
    pub top1_accuracy: f64,
    /// Zero for classes without test images.
    pub per_class_accuracy: Vec<f64>,
    pub per_class_count: Vec<usize>,
    pub n_test: usize,
    pub train_history: Vec<EpochStats>,
}

/// Top-1 over every image in `test`, no test-time augmentation.
pub fn evaluate(model: &dyn Classifier, test: &LabeledImages, task_name: &str) -> Result<EvalResult, HarnessError> {
    let k = test.num_classes();
    if model.num_classes() != k {
        return Err(HarnessError::ClassCountMismatch {
            model: model.num_classes(),
            task: k,
        });
    }
    let indices: Vec<usize> = (0..test.len()).collect();
    let preds = model.predict(test, &indices)?;
    let mut correct = vec![0usize; k];
    let mut count = vec![0usize; k];
    for (&truth, &pred) in test.labels.iter().zip(&preds) {
        count[truth] += 1;
        if truth == pred {
            correct[truth] += 1;
        }
    }
    let n = test.len();
    Ok(EvalResult {
        task: task_name.into(),
        trick_composition: model.trick_composition(),
        architecture: model.architecture(),
        top1_accuracy: if n == 0 { 0.0 } else { correct.iter().sum::<usize>() as f64 / n as f64 },
        per_class_accuracy: correct
            .iter()
            .zip(&count)
            .map(|(&c, &m)| if m == 0 { 0.0 } else { c as f64 / m as f64 })
            .collect(),
        per_class_count: count,
        n_test: n,
        train_history: model.history(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Real,
    Synthetic,
}

impl FeatureSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureSource::Real => "real",
            FeatureSource::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub source: FeatureSource,
    pub label: String,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub rows: Vec<FeatureRow>,
}

impl FeatureMatrix {
    pub fn append(&mut self, other: FeatureMatrix) {
        if self.rows.is_empty() {
            self.dim = other.dim;
        }
        assert_eq!(self.dim, other.dim, "feature widths differ");
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,label");
        for i in 0..self.dim {
            let _ = write!(out, ",f{i}");
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(r.source.as_str());
            out.push(',');
            out.push_str(&csv_field(&r.label));
            for v in &r.values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        crate::assembler::write_atomic(path, self.to_csv().as_bytes()).map_err(HarnessError::io(path))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Penultimate-layer features for every image in `data`, tagged with
/// `source` and the class label.
pub fn extract_features(
    model: &dyn Classifier,
    data: &LabeledImages,
    source: FeatureSource,
) -> Result<FeatureMatrix, HarnessError> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let feats = model.features(data, &indices)?;
    let dim = feats.first().map_or(0, Vec::len);
    Ok(FeatureMatrix {
        dim,
        rows: feats
            .into_iter()
            .zip(&data.labels)
            .map(|(values, &l)| FeatureRow {
                source,
                label: data.class_labels[l].clone(),
                values,
            })
            .collect(),
    })
}
