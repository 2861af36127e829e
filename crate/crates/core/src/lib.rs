//! Diversity-enhanced synthetic datasets for model-agnostic zero-shot
//! classification.
//!
//! The pipeline turns a list of class names into a synthetic training set
//! with a text-to-image backend, then trains and evaluates ordinary
//! classifiers on it:
//!
//! 1. [`task`]: the classification problem and the trick vocabulary.
//! 2. [`prompt`]: expands a task and trick into a seeded request plan.
//! 3. [`backend`]: runs plans against a remote diffusion server or a
//!    deterministic mock, with checkpointed resume.
//! 4. [`sampler`]: convex-combination sampling of conditioning embeddings.
//! 5. [`assembler`]: rescales generated images and writes a hashed manifest.
//! 6. [`harness`]: trains classifiers from scratch and measures top-1.
//! 7. [`report`]: result tables with deltas against the base-class baseline.

pub mod assembler;
pub mod backend;
pub mod harness;
pub mod hashing;
pub mod prompt;
pub mod report;
pub mod sampler;
pub mod task;

pub use assembler::{DatasetManifest, ManifestEntry, ManifestHeader};
pub use backend::{BackendDescriptor, BackendKind, ImageRecord};
pub use prompt::{GenerationRequest, PlanRng};
pub use sampler::{EmbeddingSet, SamplePlan, SampleScheme};
pub use task::{ClassificationTask, DomainCatalog, DomainStyle, ImageSize, TrickKind, TrickWeight};

/// Version string recorded into plans, manifests and model artifacts.
pub const TOOL_VERSION: &str = concat!("divgen ", env!("CARGO_PKG_VERSION"));
