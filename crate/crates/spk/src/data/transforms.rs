//! Per-sample image augmentations and the pipeline algebra combining them.
//!
//! Images are `(C, H, W)` float arrays in `[0, 1]` until a `normalize` step
//! rescales them. Every stochastic transform draws from the RNG the loader
//! hands in, which is derived from `(seed, epoch, position)`, so results do
//! not depend on worker topology and are reproducible per fetch.

use crate::error::{Error, Result};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

fn default_p_half() -> f64 {
    0.5
}

fn default_scale() -> (f64, f64) {
    (0.08, 1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    /// Crop a random sub-region (area fraction in `scale`, aspect ratio in
    /// [3/4, 4/3]) and resize it to `size` x `size`.
    RandomResizedCrop {
        size: usize,
        #[serde(default = "default_scale")]
        scale: (f64, f64),
    },
    RandomHorizontalFlip {
        #[serde(default = "default_p_half")]
        p: f64,
    },
    /// Random brightness/contrast/saturation scaling, each factor drawn
    /// from `[1 - x, 1 + x]`, applied in that fixed order with
    /// probability `p`.
    ColorJitter {
        #[serde(default)]
        brightness: f64,
        #[serde(default)]
        contrast: f64,
        #[serde(default)]
        saturation: f64,
        #[serde(default = "default_p_half")]
        p: f64,
    },
    RandomGrayscale {
        #[serde(default = "default_p_half")]
        p: f64,
    },
    /// Invert values above `threshold` with probability `p`.
    RandomSolarize {
        threshold: f64,
        #[serde(default = "default_p_half")]
        p: f64,
    },
    Resize {
        size: usize,
    },
    /// Per-channel standardization `(x - mean) / std`.
    Normalize {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
}

/// Bilinear resampling (half-pixel centers).
fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = Array3::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let top = img[(ch, y0, x0)] * (1.0 - wx) + img[(ch, y0, x1)] * wx;
                let bot = img[(ch, y1, x0)] * (1.0 - wx) + img[(ch, y1, x1)] * wx;
                out[(ch, oy, ox)] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

fn crop(img: &Array3<f64>, top: usize, left: usize, ch: usize, cw: usize) -> Array3<f64> {
    img.slice(ndarray::s![.., top..top + ch, left..left + cw])
        .to_owned()
}

fn grayscale(img: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return img.clone();
    }
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let luma =
                0.299 * img[(0, y, x)] + 0.587 * img[(1, y, x)] + 0.114 * img[(2, y, x)];
            for ch in 0..3 {
                out[(ch, y, x)] = luma;
            }
        }
    }
    out
}

impl Transform {
    pub fn apply(&self, img: &Array3<f64>, rng: &mut ChaCha12Rng) -> Result<Array3<f64>> {
        let (c, h, w) = img.dim();
        match self {
            Transform::RandomResizedCrop { size, scale } => {
                let (lo, hi) = *scale;
                if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                    return Err(Error::invalid(
                        "random_resized_crop",
                        format!("bad scale range ({lo}, {hi})"),
                    ));
                }
                let area = (h * w) as f64;
                let mut chosen = None;
                for _ in 0..10 {
                    let target = area * rng.random_range(lo..=hi);
                    let log_ratio = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
                    let ratio = log_ratio.exp();
                    let cw = (target * ratio).sqrt().round() as usize;
                    let ch = (target / ratio).sqrt().round() as usize;
                    if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
                        let top = rng.random_range(0..=h - ch);
                        let left = rng.random_range(0..=w - cw);
                        chosen = Some((top, left, ch, cw));
                        break;
                    }
                }
                // fallback: center crop of the full short side
                let (top, left, ch, cw) = chosen.unwrap_or_else(|| {
                    let side = h.min(w);
                    ((h - side) / 2, (w - side) / 2, side, side)
                });
                let cropped = crop(img, top, left, ch, cw);
                Ok(resize_bilinear(&cropped, *size, *size))
            }
            Transform::RandomHorizontalFlip { p } => {
                if rng.random::<f64>() < *p {
                    let mut out = img.clone();
                    for chn in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                out[(chn, y, x)] = img[(chn, y, w - 1 - x)];
                            }
                        }
                    }
                    Ok(out)
                } else {
                    Ok(img.clone())
                }
            }
            Transform::ColorJitter {
                brightness,
                contrast,
                saturation,
                p,
            } => {
                if rng.random::<f64>() >= *p {
                    return Ok(img.clone());
                }
                let draw = |rng: &mut ChaCha12Rng, x: f64| {
                    if x <= 0.0 {
                        1.0
                    } else {
                        rng.random_range((1.0 - x).max(0.0)..=1.0 + x)
                    }
                };
                let b = draw(rng, *brightness);
                let cf = draw(rng, *contrast);
                let s = draw(rng, *saturation);
                let mut out = img * b;
                let mean = out.mean().unwrap_or(0.0);
                out.mapv_inplace(|v| mean + (v - mean) * cf);
                if c == 3 {
                    let gray = grayscale(&out);
                    out = &gray + &((&out - &gray) * s);
                }
                out.mapv_inplace(|v| v.clamp(0.0, 1.0));
                Ok(out)
            }
            Transform::RandomGrayscale { p } => {
                if rng.random::<f64>() < *p {
                    Ok(grayscale(img))
                } else {
                    Ok(img.clone())
                }
            }
            Transform::RandomSolarize { threshold, p } => {
                if rng.random::<f64>() < *p {
                    Ok(img.mapv(|v| if v > *threshold { 1.0 - v } else { v }))
                } else {
                    Ok(img.clone())
                }
            }
            Transform::Resize { size } => Ok(resize_bilinear(img, *size, *size)),
            Transform::Normalize { mean, std } => {
                if mean.len() != c || std.len() != c {
                    return Err(Error::shape(
                        "normalize",
                        format!("{c} channels vs mean/std of {}/{}", mean.len(), std.len()),
                    ));
                }
                if std.iter().any(|&s| s <= 0.0) {
                    return Err(Error::invalid("normalize", "std entries must be positive"));
                }
                let mut out = img.clone();
                for chn in 0..c {
                    let (m, s) = (mean[chn], std[chn]);
                    out.index_axis_mut(ndarray::Axis(0), chn)
                        .mapv_inplace(|v| (v - m) / s);
                }
                Ok(out)
            }
        }
    }
}

/// How a dataset turns one source image into model input: nothing, one
/// transform chain, or one chain per view.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformPipeline {
    #[default]
    Identity,
    Compose {
        steps: Vec<Transform>,
    },
    MultiView {
        views: Vec<Vec<Transform>>,
    },
}

impl TransformPipeline {
    /// Number of views one source sample expands into.
    pub fn n_views(&self) -> usize {
        match self {
            TransformPipeline::MultiView { views } => views.len(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let TransformPipeline::MultiView { views } = self {
            if views.is_empty() {
                return Err(Error::config("multi_view pipeline needs at least one view"));
            }
        }
        Ok(())
    }

    /// Applies the pipeline for one view slot. Non-multi-view pipelines
    /// ignore the slot (each fetch still gets fresh randomness from `rng`);
    /// multi-view pipelines select the sub-chain `slot mod n_views`.
    pub fn apply_view(
        &self,
        img: &Array3<f64>,
        slot: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Array3<f64>> {
        let steps: &[Transform] = match self {
            TransformPipeline::Identity => &[],
            TransformPipeline::Compose { steps } => steps,
            TransformPipeline::MultiView { views } => &views[slot % views.len()],
        };
        let mut out = img.clone();
        for t in steps {
            out = t.apply(&out, rng)?;
        }
        Ok(out)
    }
}
