//! Model artifacts: one safetensors file with weights, batch-norm running
//! statistics and a JSON metadata record under the `divgen` key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use candle_core::{Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::arch::{Architecture, Network};
use super::params::ParamStore;
use super::train::EpochStats;
use super::{HarnessError, TrainRunConfig};
use crate::task::ImageSize;

pub const ARTIFACT_FORMAT: &str = "divgen-model/1";
const META_KEY: &str = "divgen";
const FORMAT_KEY: &str = "format";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub architecture: Architecture,
    pub class_labels: Vec<String>,
    pub native_size: ImageSize,
    pub task_name: String,
    pub trick_composition: String,
    /// Digest of the manifest the weights were trained on.
    pub manifest_digest: String,
    pub train_config: TrainRunConfig,
    pub weight_decay: f64,
    pub history: Vec<EpochStats>,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

pub struct TrainedModel {
    pub meta: ModelMeta,
    pub(crate) store: Arc<ParamStore>,
    pub(crate) net: Box<dyn Network>,
    pub(crate) device: Device,
}

impl std::fmt::Debug for TrainedModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainedModel")
            .field("meta", &self.meta)
            .field("parameters", &self.store.len())
            .finish()
    }
}

impl TrainedModel {
    /// Randomly initialised model, seeded from the training config.
    pub fn fresh(meta: ModelMeta) -> Result<Self, HarnessError> {
        let device = Device::Cpu;
        let store = ParamStore::seeded(meta.train_config.seed);
        let net = meta
            .architecture
            .build(meta.class_labels.len(), meta.native_size, store.var_builder(&device))?;
        Ok(Self {
            meta,
            store,
            net,
            device,
        })
    }

    pub fn network(&self) -> &dyn Network {
        self.net.as_ref()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.snapshot().values().map(|t| t.elem_count()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, HarnessError> {
        let snapshot = self.store.snapshot();
        let mut raw: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
        for (name, t) in snapshot {
            let values: Vec<f32> = t.flatten_all()?.to_vec1()?;
            let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            raw.insert(name, (t.dims().to_vec(), bytes));
        }
        let views = raw
            .iter()
            .map(|(name, (shape, bytes))| {
                TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (name.clone(), v))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| self.artifact_err("<memory>", e))?;
        let mut info = HashMap::new();
        info.insert(FORMAT_KEY.to_string(), ARTIFACT_FORMAT.to_string());
        info.insert(
            META_KEY.to_string(),
            serde_json::to_string(&self.meta).expect("metadata serializes"),
        );
        let mut bytes =
            safetensors::tensor::serialize(views, Some(info)).map_err(|e| self.artifact_err("<memory>", e))?;
        canonicalize_header(&mut bytes).map_err(|e| self.artifact_err("<memory>", e))?;
        Ok(bytes)
    }

    fn artifact_err(&self, path: &str, e: impl std::fmt::Display) -> HarnessError {
        HarnessError::Artifact {
            path: path.into(),
            message: e.to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        crate::assembler::write_atomic(path, &self.to_bytes()?).map_err(HarnessError::io(path))
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, HarnessError> {
        let bad = |message: String| HarnessError::Artifact {
            path: origin.into(),
            message,
        };
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let info = header.metadata().as_ref().ok_or_else(|| bad("no metadata".into()))?;
        if info.get(FORMAT_KEY).map(String::as_str) != Some(ARTIFACT_FORMAT) {
            return Err(bad(format!("not a {ARTIFACT_FORMAT} artifact")));
        }
        let meta: ModelMeta = serde_json::from_str(
            info.get(META_KEY).ok_or_else(|| bad("metadata record missing".into()))?,
        )
        .map_err(|e| bad(e.to_string()))?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let device = Device::Cpu;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("{name}: dtype {:?}, expected F32", view.dtype())));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::from_vec(values, view.shape(), &device)?);
        }
        let expected = tensors.len();
        let store = ParamStore::from_tensors(tensors)?;
        let net = meta
            .architecture
            .build(meta.class_labels.len(), meta.native_size, store.var_builder(&device))
            .map_err(|e| bad(e.to_string()))?;
        debug_assert_eq!(store.len(), expected);
        Ok(Self {
            meta,
            store,
            net,
            device,
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Rewrite the JSON header with sorted keys so equal models give equal
/// bytes; the metadata map is a `HashMap` and serializes in random order.
fn canonicalize_header(bytes: &mut [u8]) -> Result<(), String> {
    type Sorted = BTreeMap<String, BTreeMap<String, serde_json::Value>>;
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte prefix")) as usize;
    let region = &mut bytes[8..8 + len];
    let header: Sorted = serde_json::from_slice(region).map_err(|e| e.to_string())?;
    let text = serde_json::to_vec(&header).map_err(|e| e.to_string())?;
    if text.len() > len {
        return Err("canonical header longer than original".into());
    }
    region[..text.len()].copy_from_slice(&text);
    region[text.len()..].fill(b' ');
    Ok(())
}
