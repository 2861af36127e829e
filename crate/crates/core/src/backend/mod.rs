//! Text-to-image backends.
//!
//! Two implementations sit behind [`ImageBackend`]: [`RemoteBackend`], an
//! HTTP client for a diffusion server speaking the `/generate` protocol
//! below, and [`MockBackend`], a pure function of the request used for
//! testing the rest of the pipeline without a GPU.
//!
//! Wire protocol: `POST {endpoint}/generate` with a JSON [`WireRequest`]
//! body. A `200` response carries a PNG body and an
//! `X-Backend-Fingerprint` header; anything else is a rejection.

mod mock;
mod remote;
mod runner;

use std::collections::BTreeMap;
use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::GenerationRequest;

pub use mock::{base_color, mock_image, noise_amplitude, MockBackend, MOCK_NOISE_FLOOR};
pub use remote::RemoteBackend;
pub use runner::{
    generate_plan, read_checkpoint, DirectorySink, MemorySink, RecordSink, RunOptions,
    RunSummary, RunError, StagedRecord, DEFAULT_FAILURE_THRESHOLD,
};

pub const FINGERPRINT_HEADER: &str = "X-Backend-Fingerprint";
pub const DEFAULT_MODEL_ID: &str = "stable-diffusion-v1.4";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unreachable after {attempts} attempts: {last_error}")]
    BackendUnreachable { attempts: u32, last_error: String },
    #[error("backend rejected request with status {status}: {body}")]
    BackendRejectedRequest { status: u16, body: String },
    #[error("request timed out after {attempts} attempts")]
    TimeoutExceeded { attempts: u32 },
    #[error("expected {expected_width}x{expected_height} pixels, backend returned {width}x{height}")]
    PixelShapeMismatch {
        expected_width: u32,
        expected_height: u32,
        width: u32,
        height: u32,
    },
    #[error("could not decode backend image: {0}")]
    UndecodableImage(String),
    #[error("invalid backend descriptor: {0}")]
    InvalidDescriptor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    RemoteDiffusion,
    DeterministicMock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Per-request timeout, seconds.
    #[serde(default = "default_timeout")]
    pub request_timeout: f64,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    /// First retry delay, seconds; doubles on every further attempt.
    #[serde(default = "default_backoff")]
    pub retry_backoff: f64,
}

fn default_model_id() -> String {
    DEFAULT_MODEL_ID.to_string()
}
fn default_max_in_flight() -> usize {
    4
}
fn default_timeout() -> f64 {
    120.0
}
fn default_retry_limit() -> u32 {
    3
}
fn default_backoff() -> f64 {
    0.5
}

impl BackendDescriptor {
    pub fn mock() -> Self {
        Self {
            kind: BackendKind::DeterministicMock,
            endpoint: None,
            model_id: default_model_id(),
            max_in_flight: default_max_in_flight(),
            request_timeout: default_timeout(),
            retry_limit: default_retry_limit(),
            retry_backoff: default_backoff(),
        }
    }

    pub fn remote(endpoint: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::RemoteDiffusion,
            endpoint: Some(endpoint.into()),
            ..Self::mock()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match (self.kind, &self.endpoint) {
            (BackendKind::RemoteDiffusion, None) => {
                return Err(BackendError::InvalidDescriptor(
                    "remote_diffusion needs an endpoint".into(),
                ))
            }
            (BackendKind::DeterministicMock, Some(_)) => {
                return Err(BackendError::InvalidDescriptor(
                    "deterministic_mock takes no endpoint".into(),
                ))
            }
            _ => {}
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::InvalidDescriptor(
                "max_in_flight must be at least 1".into(),
            ));
        }
        if !(self.request_timeout > 0.0) || !(self.retry_backoff >= 0.0) {
            return Err(BackendError::InvalidDescriptor(
                "request_timeout must be positive and retry_backoff non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout)
    }

    /// Instantiate the described backend.
    pub fn build(&self) -> Result<Box<dyn ImageBackend>, BackendError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::DeterministicMock => Box::new(MockBackend::new(&self.model_id)),
            BackendKind::RemoteDiffusion => Box::new(RemoteBackend::new(self)?),
        })
    }
}

/// One generated image at the backend's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub request_id: u64,
    pub pixels: RgbImage,
    pub backend_fingerprint: String,
    /// Seconds spent producing the image.
    pub wall_time: f64,
}

/// JSON body of `POST /generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub prompt: String,
    pub seed: u64,
    pub guidance_scale: f64,
    pub steps: u32,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl From<&GenerationRequest> for WireRequest {
    fn from(req: &GenerationRequest) -> Self {
        Self {
            prompt: req.prompt.clone(),
            seed: req.seed,
            guidance_scale: req.guidance_scale,
            steps: req.ddim_steps,
            width: req.width,
            height: req.height,
            embedding: req.conditioning_embedding.clone(),
            metadata: req.metadata(),
        }
    }
}

pub trait ImageBackend: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<ImageRecord, BackendError>;

    /// Identifies backend kind and model.
    fn fingerprint(&self) -> String;
}

/// Run one request on `backend`.
pub fn generate(
    req: &GenerationRequest,
    backend: &dyn ImageBackend,
) -> Result<ImageRecord, BackendError> {
    let record = backend.generate(req)?;
    let (width, height) = record.pixels.dimensions();
    if (width, height) != (req.width, req.height) {
        return Err(BackendError::PixelShapeMismatch {
            expected_width: req.width,
            expected_height: req.height,
            width,
            height,
        });
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_rules() {
        assert!(BackendDescriptor::mock().validate().is_ok());
        assert!(BackendDescriptor::remote("http://x").validate().is_ok());
        let mut bad = BackendDescriptor::remote("http://x");
        bad.endpoint = None;
        assert!(bad.validate().is_err());
        let mut bad = BackendDescriptor::mock();
        bad.max_in_flight = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn descriptor_rejects_unknown_keys() {
        let err = serde_json::from_str::<BackendDescriptor>(
            r#"{"kind": "deterministic_mock", "bogus": 1}"#,
        );
        assert!(err.is_err());
        let ok: BackendDescriptor =
            serde_json::from_str(r#"{"kind": "deterministic_mock"}"#).unwrap();
        assert_eq!(ok.model_id, "stable-diffusion-v1.4");
    }

    #[test]
    fn wire_body_field_names() {
        let req = GenerationRequest {
            request_id: 0,
            class_index: 0,
            class_label: "cat".into(),
            trick: crate::task::TrickKind::BaseClass,
            prompt: "an image of a cat".into(),
            seed: 7,
            guidance_scale: 7.5,
            domain: None,
            ddim_steps: 40,
            width: 512,
            height: 512,
            conditioning_embedding: Some(vec![1.0, 0.0]),
        };
        let v = serde_json::to_value(WireRequest::from(&req)).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["embedding", "guidance_scale", "height", "metadata", "prompt", "seed", "steps", "width"]
        );
        assert_eq!(obj["metadata"]["class"], "cat");
        assert_eq!(obj["steps"], 40);
    }
}
