//! Image geometry for model input.
//!
//! [`ocr_resize`] fits the longer edge to the target resolution while keeping
//! the aspect ratio, then pads the short axis with replicated border pixels.
//! The split of that padding between the two sides is random during training,
//! which makes the transform a translation augmentation; at evaluation time
//! it is centered.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub resolution: usize,
    /// Floor on both resized edges.
    pub min_edge: usize,
    /// Draw the padding split at random instead of centering it.
    pub randomize_pad: bool,
    pub rng_seed: u64,
    /// Kept for parity with the reference transform, which never reads it.
    #[serde(default)]
    pub is_document: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resolution: 480,
            min_edge: 64,
            randomize_pad: true,
            rng_seed: 0,
            is_document: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.min_edge == 0 || self.min_edge > self.resolution {
            return Err(Error::Argument(format!(
                "need 0 < min_edge ({}) <= resolution ({})",
                self.min_edge, self.resolution
            )));
        }
        Ok(())
    }

    /// Same transform with centered padding. The seed is cleared since
    /// nothing is drawn.
    pub fn deterministic(self) -> Self {
        AugmentConfig {
            randomize_pad: false,
            rng_seed: 0,
            ..self
        }
    }
}

/// Resize target and padding budget chosen by [`ocr_resize`] for a `width × height` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResizePlan {
    pub new_width: usize,
    pub new_height: usize,
    /// Total padding along x (left + right); zero when the input is at least as wide as tall.
    pub pad_x: usize,
    /// Total padding along y (top + bottom).
    pub pad_y: usize,
}

pub fn plan_resize(width: usize, height: usize, cfg: &AugmentConfig) -> ResizePlan {
    let res = cfg.resolution;
    if width >= height {
        let new_width = cfg.min_edge.max(res);
        // truncation of the float product, as `int()` does
        let new_height = cfg.min_edge.max((res as f64 * (height as f64 / width as f64)) as usize);
        ResizePlan {
            new_width,
            new_height,
            pad_x: 0,
            pad_y: res.saturating_sub(new_height),
        }
    } else {
        let new_height = cfg.min_edge.max(res);
        let new_width = cfg.min_edge.max((res as f64 * (width as f64 / height as f64)) as usize);
        ResizePlan {
            new_width,
            new_height,
            pad_x: res.saturating_sub(new_width),
            pad_y: 0,
        }
    }
}

/// Catmull-Rom cubic convolution kernel (a = −0.5).
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample source taps as (clamped source index, normalized weight).
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    // widen the kernel when shrinking so every source pixel contributes
    let support = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - 2.0 * support).floor() as isize;
            let hi = (center + 2.0 * support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|j| (j.clamp(0, src as isize - 1) as usize, cubic((j as f64 - center) / support)))
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Resamples the rows of a `w`-wide interleaved raster to `taps.len()` columns.
fn resample_rows(src: &[f64], w: usize, taps: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let out_w = taps.len();
    let rows = src.len() / (w * CHANNELS);
    let mut out = vec![0.0; out_w * rows * CHANNELS];
    for (row, dst) in src.chunks_exact(w * CHANNELS).zip(out.chunks_exact_mut(out_w * CHANNELS)) {
        for (px, along) in dst.chunks_exact_mut(CHANNELS).zip(taps) {
            let mut acc = [0.0; CHANNELS];
            for &(j, wt) in along {
                let s = &row[j * CHANNELS..j * CHANNELS + CHANNELS];
                for c in 0..CHANNELS {
                    acc[c] += wt * s[c];
                }
            }
            px.copy_from_slice(&acc);
        }
    }
    out
}

/// Resamples the columns of a `w`-wide interleaved raster to `taps.len()` rows.
fn resample_columns(src: &[f64], w: usize, taps: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let stride = w * CHANNELS;
    let mut out = vec![0.0; stride * taps.len()];
    for (dst, along) in out.chunks_exact_mut(stride).zip(taps) {
        for &(j, wt) in along {
            let row = &src[j * stride..(j + 1) * stride];
            dst.iter_mut().zip(row).for_each(|(d, s)| *d += wt * s);
        }
    }
    out
}

/// Separable bicubic resample with clamped borders; output clamped to `[0, 1]`.
/// The cheaper axis order is taken, which only moves rounding.
pub fn resize_bicubic(img: &Image, new_w: usize, new_h: usize) -> Result<Image> {
    if new_w == 0 || new_h == 0 {
        return Err(Error::Argument(format!("resize target must be positive, got {new_w}x{new_h}")));
    }
    let (w, h) = (img.width(), img.height());
    let xw = axis_weights(w, new_w);
    let yw = axis_weights(h, new_h);
    let taps = |t: &[Vec<(usize, f64)>]| t.first().map_or(0, Vec::len);
    let x_first = h * new_w * taps(&xw) + new_h * new_w * taps(&yw);
    let y_first = new_h * w * taps(&yw) + new_h * new_w * taps(&xw);
    let mut out = if x_first <= y_first {
        resample_columns(&resample_rows(img.pixels(), w, &xw), new_w, &yw)
    } else {
        resample_rows(&resample_columns(img.pixels(), w, &yw), w, &xw)
    };
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Image::new(new_w, new_h, out)
}

/// Extends the image by replicating its nearest border pixel.
pub fn pad_edge(img: &Image, left: usize, top: usize, right: usize, bottom: usize) -> Image {
    let (w, h) = (img.width(), img.height());
    Image::from_fn(w + left + right, h + top + bottom, |x, y| {
        let sx = x.saturating_sub(left).min(w - 1);
        let sy = y.saturating_sub(top).min(h - 1);
        img.get(sx, sy)
    })
}

/// Signed-pad variant for callers holding untrusted offsets.
pub fn pad_edge_checked(img: &Image, left: i64, top: i64, right: i64, bottom: i64) -> Result<Image> {
    let pads = [left, top, right, bottom];
    if pads.iter().any(|&p| p < 0) {
        return Err(Error::Argument(format!("pads must be non-negative, got {pads:?}")));
    }
    Ok(pad_edge(img, left as usize, top as usize, right as usize, bottom as usize))
}

/// Aspect-preserving resize to `resolution × resolution` with edge padding.
///
/// `rng` is consumed only when `cfg.randomize_pad` is set.
pub fn ocr_resize<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<Image> {
    cfg.validate()?;
    let plan = plan_resize(img.width(), img.height(), cfg);
    let resized = resize_bicubic(img, plan.new_width, plan.new_height)?;
    let split = |total: usize, rng: &mut R| {
        if cfg.randomize_pad {
            rng.random_range(0..=total)
        } else {
            total / 2
        }
    };
    let (left, right, top, bottom) = if img.width() >= img.height() {
        let top = split(plan.pad_y, rng);
        (0, 0, top, plan.pad_y - top)
    } else {
        let left = split(plan.pad_x, rng);
        (left, plan.pad_x - left, 0, 0)
    };
    Ok(pad_edge(&resized, left, top, right, bottom))
}

/// How images are brought to the model's square input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preprocess {
    /// [`ocr_resize`].
    Aspect(AugmentConfig),
    /// Plain bicubic resize to the square, ignoring aspect ratio.
    Stretch { resolution: usize },
}

impl Preprocess {
    pub fn resolution(&self) -> usize {
        match self {
            Preprocess::Aspect(c) => c.resolution,
            Preprocess::Stretch { resolution } => *resolution,
        }
    }

    /// Evaluation-time form: never consumes randomness.
    pub fn deterministic(self) -> Self {
        match self {
            Preprocess::Aspect(c) => Preprocess::Aspect(c.deterministic()),
            s => s,
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Result<Image> {
        match self {
            Preprocess::Aspect(c) => ocr_resize(img, c, rng),
            Preprocess::Stretch { resolution } => resize_bicubic(img, *resolution, *resolution),
        }
    }

    pub fn apply_deterministic(&self, img: &Image) -> Result<Image> {
        // centered padding never draws from the stream
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        self.deterministic().apply(img, &mut unused)
    }
}

/// Corner-aligned linear interpolation weights along one axis:
/// for each output index, `(lower source index, upper source index, upper weight)`.
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn check_grid(h: usize, w: usize, new_h: usize, new_w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(Error::Argument(format!("positional grid {h}x{w} is too small to interpolate")));
    }
    if new_h == 0 || new_w == 0 {
        return Err(Error::Argument(format!("target grid {new_h}x{new_w} must be non-empty")));
    }
    Ok(())
}

/// Bilinear resample of an `h × w × d` embedding grid with aligned corners.
pub fn interpolate_pos_embeddings(grid: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let &[h, w, d] = grid.shape() else {
        return Err(Error::Argument(format!("expected an h×w×d grid, got {:?}", grid.shape())));
    };
    check_grid(h, w, new_h, new_w)?;
    let m = interpolation_matrix(h, w, new_h, new_w)?;
    let src = grid.data();
    let mut out = vec![0.0; new_h * new_w * d];
    for (o, row) in m.chunks(h * w).enumerate() {
        let dst = &mut out[o * d..(o + 1) * d];
        for (s, &wt) in row.iter().enumerate() {
            if wt != 0.0 {
                dst.iter_mut().zip(&src[s * d..(s + 1) * d]).for_each(|(a, b)| *a += wt * b);
            }
        }
    }
    Tensor::new(vec![new_h, new_w, d], out)
}

/// Row-major `(new_h·new_w) × (h·w)` matrix `M` such that `M · grid` is the
/// bilinear resample; lets the resample sit inside a differentiable graph.
pub fn interpolation_matrix(h: usize, w: usize, new_h: usize, new_w: usize) -> Result<Vec<f64>> {
    check_grid(h, w, new_h, new_w)?;
    let ty = linear_taps(h, new_h);
    let tx = linear_taps(w, new_w);
    let mut m = vec![0.0; new_h * new_w * h * w];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let row = &mut m[(oy * new_w + ox) * h * w..(oy * new_w + ox + 1) * h * w];
            row[y0 * w + x0] += (1.0 - fy) * (1.0 - fx);
            row[y0 * w + x1] += (1.0 - fy) * fx;
            row[y1 * w + x0] += fy * (1.0 - fx);
            row[y1 * w + x1] += fy * fx;
        }
    }
    Ok(m)
}
