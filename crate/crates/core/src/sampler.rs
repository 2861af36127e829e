//! Interpolated-embedding conditioning.
//!
//! Real exemplar images are encoded into feature vectors, and new
//! conditioning vectors are drawn as random convex combinations of them.
//! Two schemes are offered:
//!
//! - [`SampleScheme::FullHull`]: flat-Dirichlet weights over all `N`
//!   exemplars. Averages of many points concentrate near the centroid.
//! - [`SampleScheme::KSubset`]: pick `k` distinct exemplars uniformly, then
//!   flat-Dirichlet weights over just those. With small `k` the draws
//!   spread much more evenly over the hull.
//!
//! [`circle_demo`] measures the difference on points spaced around a circle.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{seed_bytes, stable_hash_parts};
use crate::prompt::{render_prompt, GenerationRequest, DEFAULT_DDIM_STEPS, DEFAULT_GENERATION_SIDE, DEFAULT_GUIDANCE_SCALE};
use crate::task::TrickKind;

/// Sampled vectors with a smaller norm than this cannot be normalized.
pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("embedding set is empty")]
    EmptySet,
    #[error("row {row} has {found} dimensions, expected {expected}")]
    RaggedSet {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("{ids} source ids for {rows} vectors")]
    IdCountMismatch { ids: usize, rows: usize },
    #[error("encoder failed on image {image_id}: {message}")]
    EncoderFailure { image_id: String, message: String },
    #[error("invalid sample plan: {0}")]
    InvalidPlan(String),
    #[error("sampled vector has near-zero norm {norm:e} twice in a row")]
    ZeroVector { norm: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub source_ids: Vec<String>,
    pub encoder_fingerprint: String,
}

impl EmbeddingSet {
    pub fn new(
        vectors: Vec<Vec<f64>>,
        source_ids: Vec<String>,
        encoder_fingerprint: impl Into<String>,
    ) -> Result<Self, SamplerError> {
        let set = Self {
            vectors,
            source_ids,
            encoder_fingerprint: encoder_fingerprint.into(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let first = self.vectors.first().ok_or(SamplerError::EmptySet)?;
        let dim = first.len();
        for (row, v) in self.vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(SamplerError::RaggedSet {
                    row,
                    expected: dim,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(SamplerError::NonFinite(row));
            }
        }
        if self.source_ids.len() != self.vectors.len() {
            return Err(SamplerError::IdCountMismatch {
                ids: self.source_ids.len(),
                rows: self.vectors.len(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

/// Maps an image to a feature vector.
pub trait ImageEncoder {
    fn fingerprint(&self) -> String;
    fn encode(&self, image: &RgbImage) -> Result<Vec<f64>, String>;
}

/// Mean RGB in [0, 1]; a stand-in encoder for tests and dry runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanRgbEncoder;

impl ImageEncoder for MeanRgbEncoder {
    fn fingerprint(&self) -> String {
        "mean_rgb:v1".into()
    }

    fn encode(&self, image: &RgbImage) -> Result<Vec<f64>, String> {
        let n = image.width() as f64 * image.height() as f64;
        if n == 0.0 {
            return Err("image has no pixels".into());
        }
        let mut sum = [0.0f64; 3];
        for p in image.pixels() {
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
        }
        Ok(sum.iter().map(|s| s / n / 255.0).collect())
    }
}

pub fn encode_exemplars(
    images: &[(String, RgbImage)],
    encoder: &dyn ImageEncoder,
) -> Result<EmbeddingSet, SamplerError> {
    if images.is_empty() {
        return Err(SamplerError::EmptySet);
    }
    let mut vectors = Vec::with_capacity(images.len());
    for (id, img) in images {
        vectors.push(encoder.encode(img).map_err(|message| SamplerError::EncoderFailure {
            image_id: id.clone(),
            message,
        })?);
    }
    EmbeddingSet::new(
        vectors,
        images.iter().map(|(id, _)| id.clone()).collect(),
        encoder.fingerprint(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleScheme {
    FullHull,
    KSubset,
}

impl fmt::Display for SampleScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleScheme::FullHull => "full_hull",
            SampleScheme::KSubset => "k_subset",
        })
    }
}

impl FromStr for SampleScheme {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" | "full_hull" => Ok(SampleScheme::FullHull),
            "k3" | "k_subset" | "ksubset" => Ok(SampleScheme::KSubset),
            _ => Err(SamplerError::InvalidPlan(format!("unknown scheme {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub scheme: SampleScheme,
    #[serde(default = "default_k")]
    pub k: usize,
    pub count: usize,
    pub rng_seed: u64,
}

fn default_k() -> usize {
    3
}

impl SamplePlan {
    pub fn full_hull(count: usize, rng_seed: u64) -> Self {
        Self {
            scheme: SampleScheme::FullHull,
            k: default_k(),
            count,
            rng_seed,
        }
    }

    pub fn k_subset(k: usize, count: usize, rng_seed: u64) -> Self {
        Self {
            scheme: SampleScheme::KSubset,
            k,
            count,
            rng_seed,
        }
    }

    pub fn validate(&self, set_len: usize) -> Result<(), SamplerError> {
        if self.count == 0 {
            return Err(SamplerError::InvalidPlan("count must be at least 1".into()));
        }
        if self.scheme == SampleScheme::KSubset && (self.k == 0 || self.k > set_len) {
            return Err(SamplerError::InvalidPlan(format!(
                "k = {} must be in 1..={set_len}",
                self.k
            )));
        }
        Ok(())
    }

    /// Generator for the plan's draw sequence.
    pub fn rng(&self) -> ChaCha20Rng {
        let seed = self.rng_seed.to_string();
        ChaCha20Rng::from_seed(seed_bytes(["divgen.sampler", seed.as_str()]))
    }
}

/// One convex combination: `vector = Σ weights[j] * set[indices[j]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub vector: Vec<f64>,
}

/// Flat Dirichlet weights: normalized independent Exp(1) variates.
pub fn flat_dirichlet<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k)
        .map(|_| {
            // (0, 1], so the log is finite
            let u = 1.0 - rng.random::<f64>();
            -u.ln()
        })
        .collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        w.iter_mut().for_each(|x| *x = 1.0 / k as f64);
    }
    w
}

/// Weighted sum of selected rows.
pub fn combine(set: &EmbeddingSet, indices: &[usize], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; set.dim()];
    for (&i, &w) in indices.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(&set.vectors[i]) {
            *o += w * x;
        }
    }
    out
}

/// Draw one convex combination under `plan`'s scheme. `plan.count` and
/// `plan.rng_seed` are not consulted; the caller owns the generator.
pub fn sample_embedding<R: Rng + ?Sized>(
    set: &EmbeddingSet,
    plan: &SamplePlan,
    rng: &mut R,
) -> Draw {
    let indices: Vec<usize> = match plan.scheme {
        SampleScheme::FullHull => (0..set.len()).collect(),
        SampleScheme::KSubset => rand::seq::index::sample(rng, set.len(), plan.k).into_vec(),
    };
    let weights = flat_dirichlet(indices.len(), rng);
    let vector = combine(set, &indices, &weights);
    Draw {
        indices,
        weights,
        vector,
    }
}

/// All `plan.count` draws, reproducible from `plan.rng_seed`.
pub fn sample_many(set: &EmbeddingSet, plan: &SamplePlan) -> Result<Vec<Draw>, SamplerError> {
    set.validate()?;
    plan.validate(set.len())?;
    let mut rng = plan.rng();
    Ok((0..plan.count)
        .map(|_| sample_embedding(set, plan, &mut rng))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeStats {
    pub scheme: SampleScheme,
    pub k: Option<usize>,
    pub draws: usize,
    pub mean_radius: f64,
    /// Counts of distance-to-centre in equal bins over `[0, radius]`.
    pub radius_histogram: Vec<usize>,
    pub mean_pairwise_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub scheme: SampleScheme,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub n_points: usize,
    pub radius: f64,
    pub rng_seed: u64,
    pub schemes: Vec<SchemeStats>,
    #[serde(skip)]
    pub samples: Vec<SamplePoint>,
}

pub const HISTOGRAM_BINS: usize = 20;

impl DiversityReport {
    pub fn stats(&self, scheme: SampleScheme) -> Option<&SchemeStats> {
        self.schemes.iter().find(|s| s.scheme == scheme)
    }

    /// Plot-ready coordinates, header `scheme,x,y`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "scheme,x,y")?;
        for p in &self.samples {
            writeln!(out, "{},{},{}", p.scheme, p.x, p.y)?;
        }
        Ok(())
    }
}

/// Points evenly spaced on a circle centred at the origin.
pub fn circle_points(n_points: usize, radius: f64) -> EmbeddingSet {
    let vectors = (0..n_points)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n_points as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect();
    EmbeddingSet {
        vectors,
        source_ids: (0..n_points).map(|i| format!("circle-{i}")).collect(),
        encoder_fingerprint: "circle".into(),
    }
}

/// Sample both schemes (k = 3 for the subset scheme) over points on a
/// circle and summarize how far the draws spread from the centre.
pub fn circle_demo(
    n_points: usize,
    radius: f64,
    draws: usize,
    rng_seed: u64,
) -> Result<DiversityReport, SamplerError> {
    if n_points < 3 {
        return Err(SamplerError::InvalidPlan("n_points must be at least 3".into()));
    }
    if draws == 0 {
        return Err(SamplerError::InvalidPlan("draws must be at least 1".into()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(SamplerError::InvalidPlan("radius must be positive".into()));
    }
    let set = circle_points(n_points, radius);
    let plans = [
        SamplePlan::full_hull(draws, rng_seed),
        SamplePlan::k_subset(3, draws, rng_seed),
    ];
    let mut schemes = Vec::new();
    let mut samples = Vec::new();
    for plan in plans {
        let points: Vec<[f64; 2]> = sample_many(&set, &plan)?
            .into_iter()
            .map(|d| [d.vector[0], d.vector[1]])
            .collect();
        let radii: Vec<f64> = points.iter().map(|p| p[0].hypot(p[1])).collect();
        let mut histogram = vec![0usize; HISTOGRAM_BINS];
        for r in &radii {
            let bin = ((r / radius) * HISTOGRAM_BINS as f64) as usize;
            histogram[bin.min(HISTOGRAM_BINS - 1)] += 1;
        }
        schemes.push(SchemeStats {
            scheme: plan.scheme,
            k: (plan.scheme == SampleScheme::KSubset).then_some(plan.k),
            draws,
            mean_radius: radii.iter().sum::<f64>() / draws as f64,
            radius_histogram: histogram,
            mean_pairwise_distance: mean_pairwise_distance(&points),
        });
        samples.extend(points.iter().map(|p| SamplePoint {
            scheme: plan.scheme,
            x: p[0],
            y: p[1],
        }));
    }
    Ok(DiversityReport {
        n_points,
        radius,
        rng_seed,
        schemes,
        samples,
    })
}

/// Exact mean Euclidean distance over all unordered pairs; 0 for a single
/// point.
pub fn mean_pairwise_distance(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(16);
    // Row i contributes n-1-i pairs; interleave rows so threads get equal work.
    let total: f64 = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    let mut acc = 0.0;
                    for i in (t..n).step_by(threads) {
                        let [xi, yi] = points[i];
                        for p in &points[i + 1..] {
                            let (dx, dy) = (xi - p[0], yi - p[1]);
                            acc += (dx * dx + dy * dy).sqrt();
                        }
                    }
                    acc
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).sum()
    });
    total / (n * (n - 1) / 2) as f64
}

/// Per-request defaults for interpolation plans.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationDefaults {
    pub master_seed: u64,
    pub task_name: String,
    pub class_index: usize,
    pub guidance_scale: f64,
    pub ddim_steps: u32,
    pub width: u32,
    pub height: u32,
    pub first_request_id: u64,
}

impl InterpolationDefaults {
    pub fn new(master_seed: u64, task_name: &str, class_index: usize) -> Self {
        Self {
            master_seed,
            task_name: task_name.to_string(),
            class_index,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            ddim_steps: DEFAULT_DDIM_STEPS,
            width: DEFAULT_GENERATION_SIDE,
            height: DEFAULT_GENERATION_SIDE,
            first_request_id: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolatedPlan {
    pub requests: Vec<GenerationRequest>,
    /// Support and weights behind each request's embedding, same order.
    pub draws: Vec<Draw>,
}

/// `plan.count` base-class requests conditioned on unit-normalized
/// convex combinations of `set`.
pub fn plan_interpolated_requests(
    set: &EmbeddingSet,
    plan: &SamplePlan,
    class_label: &str,
    defaults: &InterpolationDefaults,
) -> Result<InterpolatedPlan, SamplerError> {
    set.validate()?;
    plan.validate(set.len())?;
    let prompt = render_prompt(TrickKind::BaseClass, class_label, None, false)
        .expect("base-class prompts always render");
    let seed = defaults.master_seed.to_string();
    let scheme_tag = match plan.scheme {
        SampleScheme::FullHull => "full_hull".to_string(),
        SampleScheme::KSubset => format!("k_subset_{}", plan.k),
    };
    let seed_base = stable_hash_parts([
        "divgen.interp-seed",
        seed.as_str(),
        defaults.task_name.as_str(),
        scheme_tag.as_str(),
        class_label,
    ]);
    let mut rng = plan.rng();
    let mut requests = Vec::with_capacity(plan.count);
    let mut draws = Vec::with_capacity(plan.count);
    for i in 0..plan.count {
        let mut draw = sample_embedding(set, plan, &mut rng);
        let mut norm = l2_norm(&draw.vector);
        if norm < ZERO_NORM_THRESHOLD {
            draw = sample_embedding(set, plan, &mut rng);
            norm = l2_norm(&draw.vector);
            if norm < ZERO_NORM_THRESHOLD {
                return Err(SamplerError::ZeroVector { norm });
            }
        }
        let unit: Vec<f64> = draw.vector.iter().map(|x| x / norm).collect();
        requests.push(GenerationRequest {
            request_id: defaults.first_request_id + i as u64,
            class_index: defaults.class_index,
            class_label: class_label.to_string(),
            trick: TrickKind::BaseClass,
            prompt: prompt.clone(),
            seed: seed_base.wrapping_add(i as u64),
            guidance_scale: defaults.guidance_scale,
            domain: None,
            ddim_steps: defaults.ddim_steps,
            width: defaults.width,
            height: defaults.height,
            conditioning_embedding: Some(unit),
        });
        draws.push(draw);
    }
    Ok(InterpolatedPlan { requests, draws })
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
