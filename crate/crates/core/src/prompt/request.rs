use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::hashing::{seed_bytes, stable_hash_parts};
use crate::task::TrickKind;

/// Denoising steps used for every synthetic image unless overridden.
pub const DEFAULT_DDIM_STEPS: u32 = 40;
/// Guidance scale for tricks that do not randomize it.
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;
/// Output resolution of the diffusion backend.
pub const DEFAULT_GENERATION_SIDE: u32 = 512;

pub const RANDOM_GUIDANCE_MIN: f64 = 1.0;
pub const RANDOM_GUIDANCE_MAX: f64 = 5.0;

/// One fully determined text-to-image call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub request_id: u64,
    pub class_index: usize,
    pub class_label: String,
    pub trick: TrickKind,
    pub prompt: String,
    pub seed: u64,
    pub guidance_scale: f64,
    pub domain: Option<String>,
    pub ddim_steps: u32,
    pub width: u32,
    pub height: u32,
    /// Unit-norm conditioning vector; only set by interpolation plans.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioning_embedding: Option<Vec<f64>>,
}

impl GenerationRequest {
    /// String metadata sent alongside the request. Carries the class so
    /// backends never need to parse it back out of the prompt.
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("class".to_string(), self.class_label.clone());
        m.insert("class_index".to_string(), self.class_index.to_string());
        m.insert("trick".to_string(), self.trick.to_string());
        if let Some(d) = &self.domain {
            m.insert("domain".to_string(), d.clone());
        }
        m
    }
}

/// Deterministic generator for one `(master_seed, task, trick)` plan.
///
/// ChaCha20 keyed by the SHA-256 of the length-framed inputs, so plans are
/// byte-identical across platforms.
#[derive(Debug, Clone)]
pub struct PlanRng {
    master_seed: u64,
    task_name: String,
    trick: TrickKind,
    inner: ChaCha20Rng,
}

impl PlanRng {
    pub const ALGORITHM: &'static str = "chacha20";

    pub fn new(master_seed: u64, task_name: &str, trick: TrickKind) -> Self {
        let seed = master_seed.to_string();
        let inner = ChaCha20Rng::from_seed(seed_bytes([
            "divgen.plan-rng",
            seed.as_str(),
            task_name,
            trick.as_str(),
        ]));
        Self {
            master_seed,
            task_name: task_name.to_string(),
            trick,
            inner,
        }
    }

    /// Independent generator for another trick of the same plan.
    pub fn fork(&self, trick: TrickKind) -> Self {
        Self::new(self.master_seed, &self.task_name, trick)
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn task_name(&self) -> &str {
        &self.task_name
    }

    pub fn trick(&self) -> TrickKind {
        self.trick
    }

    /// Base of the seed range for one class. `salt` is bumped only to step
    /// around a range collision.
    pub fn class_seed_base(&self, class_label: &str, salt: u32) -> u64 {
        let seed = self.master_seed.to_string();
        let salt = salt.to_string();
        stable_hash_parts([
            "divgen.seed-base",
            seed.as_str(),
            self.task_name.as_str(),
            self.trick.as_str(),
            class_label,
            salt.as_str(),
        ])
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        self.inner.random_range(low..=high)
    }
}

impl RngCore for PlanRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Hands out non-overlapping seed ranges within one plan.
#[derive(Debug, Default)]
pub(crate) struct SeedAllocator {
    taken: Vec<(u64, u64)>,
}

impl SeedAllocator {
    /// Reserve `len` consecutive seeds starting at a hash-derived base.
    pub(crate) fn reserve(&mut self, rng: &PlanRng, class_label: &str, len: u64) -> u64 {
        let mut salt = 0;
        loop {
            let base = rng.class_seed_base(class_label, salt);
            salt += 1;
            let Some(end) = base.checked_add(len) else {
                continue;
            };
            if self.taken.iter().all(|&(s, e)| end <= s || base >= e) {
                self.taken.push((base, end));
                return base;
            }
        }
    }
}
