//! In-memory labelled image sets and their tensor batches.

use std::path::{Path, PathBuf};

use candle_core::{Device, Result as TResult, Tensor};
use image::RgbImage;

use super::HarnessError;
use crate::assembler::{verify_manifest, DatasetManifest, ResampleFilter, MANIFEST_NAME};
use crate::task::{ClassificationTask, ImageSize};

/// Images of one size, stored as packed RGB bytes, with class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub size: ImageSize,
    pub class_labels: Vec<String>,
    pub labels: Vec<usize>,
    pixels: Vec<u8>,
}

impl LabeledImages {
    pub fn new(size: ImageSize, class_labels: Vec<String>) -> Self {
        Self {
            size,
            class_labels,
            labels: Vec::new(),
            pixels: Vec::new(),
        }
    }

    pub fn push(&mut self, img: &RgbImage, label: usize) -> Result<(), ImageSize> {
        let found = ImageSize::new(img.width(), img.height());
        if found != self.size {
            return Err(found);
        }
        assert!(label < self.class_labels.len(), "label {label} out of range");
        self.pixels.extend_from_slice(img.as_raw());
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    fn stride(&self) -> usize {
        self.size.pixels() as usize * 3
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.stride()..(i + 1) * self.stride()]
    }

    pub fn image(&self, i: usize) -> RgbImage {
        RgbImage::from_raw(self.size.width, self.size.height, self.raw(i).to_vec())
            .expect("stored with matching geometry")
    }

    /// `(N, 3, H, W)` float batch scaled to [-1, 1]. `flip[j]` mirrors image
    /// `j` horizontally.
    pub fn batch(&self, indices: &[usize], flip: Option<&[bool]>, device: &Device) -> TResult<Tensor> {
        let (w, h) = (self.size.width as usize, self.size.height as usize);
        let plane = w * h;
        let mut out = vec![0f32; indices.len() * 3 * plane];
        for (j, &i) in indices.iter().enumerate() {
            let src = self.raw(i);
            let mirror = flip.is_some_and(|f| f[j]);
            let dst = &mut out[j * 3 * plane..(j + 1) * 3 * plane];
            for y in 0..h {
                for x in 0..w {
                    let sx = if mirror { w - 1 - x } else { x };
                    let p = &src[(y * w + sx) * 3..(y * w + sx) * 3 + 3];
                    for c in 0..3 {
                        dst[c * plane + y * w + x] = p[c] as f32 / 127.5 - 1.0;
                    }
                }
            }
        }
        Tensor::from_vec(out, (indices.len(), 3, h, w), device)
    }

    pub fn label_tensor(&self, indices: &[usize], device: &Device) -> TResult<Tensor> {
        let v: Vec<u32> = indices.iter().map(|&i| self.labels[i] as u32).collect();
        Tensor::from_vec(v, indices.len(), device)
    }
}

/// Map `f` over `items` on all cores, keeping order.
pub(crate) fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<U>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn read_png(path: &Path) -> Result<RgbImage, String> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| format!("{}: {e}", path.display()))
}

/// Verify a manifest and load every image it lists.
pub fn load_manifest_images(manifest_path: &Path) -> Result<(DatasetManifest, LabeledImages), HarnessError> {
    let report = verify_manifest(manifest_path);
    if !report.is_clean() {
        return Err(HarnessError::ManifestInvalid {
            violations: report.violations.iter().map(|v| v.to_string()).collect(),
        });
    }
    let manifest = DatasetManifest::read(manifest_path)
        .map_err(|m| HarnessError::ManifestInvalid { violations: vec![m] })?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let expected = manifest.header.native_size;
    let paths: Vec<PathBuf> = manifest.entries.iter().map(|e| root.join(&e.file_path)).collect();
    let images = par_map(&paths, |p| read_png(p));
    let mut set = LabeledImages::new(expected, manifest.class_labels());
    for ((img, entry), path) in images.into_iter().zip(&manifest.entries).zip(&paths) {
        let img = img.map_err(|m| HarnessError::ManifestInvalid { violations: vec![m] })?;
        set.push(&img, entry.class_index).map_err(|found| HarnessError::GeometryMismatch {
            path: path.display().to_string(),
            expected,
            found,
        })?;
    }
    Ok((manifest, set))
}

/// Load real test images for `task` from a manifest file, a directory
/// holding `manifest.jsonl`, or an image folder with one subdirectory per
/// class label. Larger images are box-filtered down to the native size.
pub fn load_test_set(test_ref: &Path, task: &ClassificationTask) -> Result<LabeledImages, HarnessError> {
    let unreadable = |message: String| HarnessError::TestSetUnreadable {
        path: test_ref.display().to_string(),
        message,
    };
    let manifest_path = if test_ref.is_file() {
        Some(test_ref.to_path_buf())
    } else if test_ref.join(MANIFEST_NAME).is_file() {
        Some(test_ref.join(MANIFEST_NAME))
    } else {
        None
    };

    let mut files: Vec<(PathBuf, usize)> = Vec::new();
    if let Some(mp) = manifest_path {
        let report = verify_manifest(&mp);
        if !report.is_clean() {
            return Err(unreadable(format!("{} integrity violations, first: {}", report.violations.len(), report.violations[0])));
        }
        let manifest = DatasetManifest::read(&mp).map_err(unreadable)?;
        let root = mp.parent().unwrap_or(Path::new("."));
        for e in &manifest.entries {
            let idx = task
                .class_index(&e.class_label)
                .ok_or_else(|| unreadable(format!("class {:?} is not in task {}", e.class_label, task.name)))?;
            files.push((root.join(&e.file_path), idx));
        }
    } else {
        if !test_ref.is_dir() {
            return Err(unreadable("no such file or directory".into()));
        }
        let subdirs = std::fs::read_dir(test_ref).map_err(|e| unreadable(e.to_string()))?;
        for d in subdirs {
            let d = d.map_err(|e| unreadable(e.to_string()))?;
            let name = d.file_name().to_string_lossy().into_owned();
            if d.path().is_dir() && task.class_index(&name).is_none() {
                return Err(unreadable(format!("class directory {name:?} is not in task {}", task.name)));
            }
        }
        for (idx, label) in task.class_labels.iter().enumerate() {
            let dir = test_ref.join(label);
            let Ok(entries) = std::fs::read_dir(&dir) else { continue };
            let mut pngs: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            pngs.sort();
            files.extend(pngs.into_iter().map(|p| (p, idx)));
        }
    }
    if files.is_empty() {
        return Err(unreadable("no test images found".into()));
    }

    let target = task.native_image_size;
    let images = par_map(&files, |(p, _)| read_png(p));
    let mut set = LabeledImages::new(target, task.class_labels.clone());
    for (img, (path, idx)) in images.into_iter().zip(&files) {
        let img = img.map_err(unreadable)?;
        let found = ImageSize::new(img.width(), img.height());
        let img = if found == target {
            img
        } else {
            crate::assembler::rescale_with(&img, target, ResampleFilter::Box).map_err(|_| {
                HarnessError::GeometryMismatch {
                    path: path.display().to_string(),
                    expected: target,
                    found,
                }
            })?
        };
        set.push(&img, *idx).expect("rescaled to target");
    }
    Ok(set)
}
