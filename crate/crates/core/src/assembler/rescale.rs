//! Downsampling from generator resolution to a dataset's native size.
//!
//! [`ResampleFilter::Box`] is the anti-aliased path: each output pixel is
//! the area-weighted mean of the source pixels its footprint covers.
//! [`ResampleFilter::Nearest`] point-samples the source at each
//! footprint's centre, so high frequencies alias straight through.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::ImageSize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RescaleError {
    #[error("target {target} is larger than source {source_size}")]
    UpscaleRequested {
        source_size: ImageSize,
        target: ImageSize,
    },
    #[error("target {0} has a zero dimension")]
    EmptyTarget(ImageSize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleFilter {
    Box,
    Nearest,
    /// Windowed sinc from the `image` crate.
    Lanczos3,
}

impl ResampleFilter {
    pub fn from_anti_alias(anti_alias: bool) -> Self {
        if anti_alias {
            ResampleFilter::Box
        } else {
            ResampleFilter::Nearest
        }
    }

    pub fn is_anti_aliased(&self) -> bool {
        !matches!(self, ResampleFilter::Nearest)
    }
}

/// Box filter when `anti_alias`, nearest neighbour otherwise.
pub fn rescale(
    pixels: &RgbImage,
    target: ImageSize,
    anti_alias: bool,
) -> Result<RgbImage, RescaleError> {
    rescale_with(pixels, target, ResampleFilter::from_anti_alias(anti_alias))
}

pub fn rescale_with(
    pixels: &RgbImage,
    target: ImageSize,
    filter: ResampleFilter,
) -> Result<RgbImage, RescaleError> {
    let source = ImageSize::new(pixels.width(), pixels.height());
    if target.width == 0 || target.height == 0 {
        return Err(RescaleError::EmptyTarget(target));
    }
    if target.width > source.width || target.height > source.height {
        return Err(RescaleError::UpscaleRequested {
            source_size: source,
            target,
        });
    }
    if target == source {
        return Ok(pixels.clone());
    }
    Ok(match filter {
        ResampleFilter::Box => box_downsample(pixels, target),
        ResampleFilter::Nearest => nearest_downsample(pixels, target),
        ResampleFilter::Lanczos3 => image::imageops::resize(
            pixels,
            target.width,
            target.height,
            image::imageops::FilterType::Lanczos3,
        ),
    })
}

/// Source index at the centre of output cell `out` when mapping `src`
/// samples onto `dst`: `floor((out + 0.5) * src / dst)`.
fn centre_index(out: u32, src: u32, dst: u32) -> u32 {
    let idx = ((2 * out as u64 + 1) * src as u64) / (2 * dst as u64);
    (idx as u32).min(src - 1)
}

fn nearest_downsample(pixels: &RgbImage, target: ImageSize) -> RgbImage {
    let (sw, sh) = pixels.dimensions();
    let cols: Vec<u32> = (0..target.width).map(|x| centre_index(x, sw, target.width)).collect();
    let rows: Vec<u32> = (0..target.height).map(|y| centre_index(y, sh, target.height)).collect();
    RgbImage::from_fn(target.width, target.height, |x, y| {
        *pixels.get_pixel(cols[x as usize], rows[y as usize])
    })
}

/// Overlap weights of each output cell with the source samples, each list
/// summing to 1.
fn area_weights(src: u32, dst: u32) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let start = o as f64 * scale;
            let end = (o + 1) as f64 * scale;
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(src as usize);
            (first..last)
                .filter_map(|i| {
                    let overlap = (end.min((i + 1) as f64) - start.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

fn box_downsample(pixels: &RgbImage, target: ImageSize) -> RgbImage {
    let (sw, sh) = pixels.dimensions();
    let wx = area_weights(sw, target.width);
    let wy = area_weights(sh, target.height);
    let tw = target.width as usize;

    // Horizontal pass into f64 rows, then vertical.
    let mut horiz = vec![[0.0f64; 3]; tw * sh as usize];
    for y in 0..sh as usize {
        for (ox, weights) in wx.iter().enumerate() {
            let mut acc = [0.0; 3];
            for &(sx, w) in weights {
                let p = pixels.get_pixel(sx as u32, y as u32);
                for c in 0..3 {
                    acc[c] += w * p[c] as f64;
                }
            }
            horiz[y * tw + ox] = acc;
        }
    }
    RgbImage::from_fn(target.width, target.height, |x, y| {
        let mut acc = [0.0; 3];
        for &(sy, w) in &wy[y as usize] {
            let h = horiz[sy * tw + x as usize];
            for c in 0..3 {
                acc[c] += w * h[c];
            }
        }
        // f64::round is half away from zero.
        Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(side: u32) -> RgbImage {
        RgbImage::from_fn(side, side, |x, y| {
            if (x + y) % 2 == 0 {
                Rgb([0, 0, 0])
            } else {
                Rgb([255, 255, 255])
            }
        })
    }

    /// Brute-force box mean: every output pixel averages its full integer
    /// footprint directly.
    fn footprint_mean(img: &RgbImage, factor: u32, ox: u32, oy: u32, c: usize) -> f64 {
        let mut sum = 0.0;
        for y in oy * factor..(oy + 1) * factor {
            for x in ox * factor..(ox + 1) * factor {
                sum += img.get_pixel(x, y)[c] as f64;
            }
        }
        sum / (factor * factor) as f64
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = RgbImage::from_pixel(512, 512, Rgb([17, 99, 201]));
        for aa in [true, false] {
            let out = rescale(&img, ImageSize::square(32), aa).unwrap();
            assert!(out.pixels().all(|p| p.0 == [17, 99, 201]));
        }
    }

    #[test]
    fn checkerboard_box_matches_brute_force_mean() {
        let img = checkerboard(512);
        let out = rescale(&img, ImageSize::square(32), true).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            for c in 0..3 {
                let oracle = footprint_mean(&img, 16, x, y, c).round() as u8;
                assert_eq!(p[c], oracle);
                assert!((p[c] as i32 - 128).abs() <= 1);
            }
        }
    }

    #[test]
    fn checkerboard_nearest_keeps_extremes() {
        let out = rescale(&checkerboard(512), ImageSize::square(32), false).unwrap();
        assert!(out.pixels().all(|p| p.0.iter().all(|&v| v == 0 || v == 255)));
    }

    #[test]
    fn non_integer_ratio_preserves_mean() {
        let img = RgbImage::from_fn(100, 70, |x, y| Rgb([(x * 2) as u8, (y * 3) as u8, 50]));
        let out = rescale(&img, ImageSize::new(30, 21), true).unwrap();
        let mean = |im: &RgbImage, c: usize| {
            im.pixels().map(|p| p[c] as f64).sum::<f64>() / (im.width() * im.height()) as f64
        };
        for c in 0..3 {
            assert!((mean(&img, c) - mean(&out, c)).abs() < 0.6);
        }
    }

    #[test]
    fn upscale_and_empty_targets_rejected() {
        let img = RgbImage::new(32, 32);
        assert!(matches!(
            rescale(&img, ImageSize::square(64), true),
            Err(RescaleError::UpscaleRequested { .. })
        ));
        assert!(matches!(
            rescale(&img, ImageSize::new(0, 4), false),
            Err(RescaleError::EmptyTarget(_))
        ));
    }

    #[test]
    fn weights_sum_to_one() {
        for (src, dst) in [(512, 32), (512, 64), (100, 30), (7, 3)] {
            for ws in area_weights(src, dst) {
                assert!((ws.iter().map(|w| w.1).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lanczos_is_selectable() {
        let out = rescale_with(&checkerboard(64), ImageSize::square(16), ResampleFilter::Lanczos3).unwrap();
        assert_eq!(out.dimensions(), (16, 16));
    }
}
