//! Deterministic stand-in for a diffusion model.
//!
//! Each image is a class-dependent base colour plus noise. Everything is
//! derived from SHA-256 and ChaCha8, so output is identical on every
//! platform. Noise amplitude falls as the guidance scale rises, like the
//! fidelity/diversity trade-off of a real sampler.

use std::f64::consts::TAU;
use std::time::Instant;

use image::{Rgb, RgbImage};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{BackendError, ImageBackend, ImageRecord, WireRequest};
use crate::hashing::{sha256_hex, stable_hash64};
use crate::prompt::GenerationRequest;

/// Lowest noise amplitude, reached at guidance ≥ 5.75, so images from
/// different seeds always differ.
pub const MOCK_NOISE_FLOOR: f64 = 0.05;
/// Half-width, in 8-bit levels, of the per-pixel noise at amplitude 1.
const PIXEL_NOISE_SPAN: f64 = 64.0;
/// Peak, in 8-bit levels, of the low-frequency wave at amplitude 1.
const WAVE_SPAN: f64 = 24.0;

#[derive(Serialize)]
struct MockKey<'a> {
    prompt: &'a str,
    seed: u64,
    guidance_scale: f64,
    ddim_steps: u32,
    class: Option<&'a str>,
    embedding: Option<String>,
}

/// Noise amplitude for a guidance scale: `(6 - g) / 5`, floored.
pub fn noise_amplitude(guidance_scale: f64) -> f64 {
    ((6.0 - guidance_scale) / 5.0).clamp(MOCK_NOISE_FLOOR, 1.0)
}

/// Base colour for a class label (or the prompt, when no class is known).
pub fn base_color(class_or_prompt: &str) -> [u8; 3] {
    let d = Sha256::digest(class_or_prompt.as_bytes());
    [d[0], d[1], d[2]]
}

/// Render the mock image for a wire request.
pub fn mock_image(req: &WireRequest) -> RgbImage {
    let class = req.metadata.get("class").map(String::as_str);
    let embedding = req.embedding.as_ref().map(|e| {
        let bytes: Vec<u8> = e.iter().flat_map(|x| x.to_le_bytes()).collect();
        sha256_hex(&bytes)
    });
    let key = MockKey {
        prompt: &req.prompt,
        seed: req.seed,
        guidance_scale: req.guidance_scale,
        ddim_steps: req.steps,
        class,
        embedding,
    };
    let canonical = serde_json::to_vec(&key).expect("mock key serializes");
    let h = stable_hash64(&canonical);
    let base = base_color(class.unwrap_or(&req.prompt));
    let amp = noise_amplitude(req.guidance_scale);

    let mut rng = ChaCha8Rng::seed_from_u64(h);
    // Integer frequencies so the wave averages to zero over the image.
    let fx = 1.0 + (rng.next_u32() % 4) as f64;
    let fy = 1.0 + (rng.next_u32() % 4) as f64;
    let phase = (rng.next_u32() as f64 / u32::MAX as f64) * TAU;

    let (w, h_px) = (req.width, req.height);
    let col: Vec<(f64, f64)> = (0..w)
        .map(|x| {
            let a = TAU * fx * x as f64 / w as f64 + phase;
            (a.sin(), a.cos())
        })
        .collect();
    let row: Vec<(f64, f64)> = (0..h_px)
        .map(|y| {
            let b = TAU * fy * y as f64 / h_px as f64;
            (b.sin(), b.cos())
        })
        .collect();

    let mut img = RgbImage::new(w, h_px);
    for (y, (sb, cb)) in row.iter().enumerate() {
        for (x, (sa, ca)) in col.iter().enumerate() {
            let wave = amp * WAVE_SPAN * (sa * cb + ca * sb);
            let mut px = [0u8; 3];
            for (c, out) in px.iter_mut().enumerate() {
                let u = rng.next_u32() as f64 / u32::MAX as f64;
                let noise = amp * PIXEL_NOISE_SPAN * (2.0 * u - 1.0);
                *out = (base[c] as f64 + wave + noise).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    model_id: String,
}

impl MockBackend {
    pub fn new(model_id: &str) -> Self {
        Self {
            model_id: model_id.to_string(),
        }
    }
}

impl ImageBackend for MockBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<ImageRecord, BackendError> {
        let start = Instant::now();
        let pixels = mock_image(&WireRequest::from(req));
        Ok(ImageRecord {
            request_id: req.request_id,
            pixels,
            backend_fingerprint: self.fingerprint(),
            wall_time: start.elapsed().as_secs_f64(),
        })
    }

    fn fingerprint(&self) -> String {
        format!("deterministic_mock:{}:v1", self.model_id)
    }
}
