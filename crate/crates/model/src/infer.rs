//! Whole-scene prediction from overlapping windows.
//!
//! The scene is reflect-padded by `window - stride` pixels on every side (more if
//! the scene is smaller than a window). Window origins are the union of a stride
//! progression from the start and its mirror image from the end, so the window set
//! is symmetric under flips. Each window is predicted under every TTA transform and
//! the inverse-transformed outputs are averaged; windows are then blended with
//! separable weights.
//!
//! Both averages sort their contributions per pixel and accumulate offsets from
//! the smallest value, which makes the result independent of contribution order and
//! exact when all contributions agree.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ava_core::dataset::{FeatureStack, N_FEATURES};
use ava_core::dihedral::Dihedral;
use ava_core::raster::{Raster, DEFAULT_NODATA};
use ava_nn::{Shape, Tensor};

pub use ava_core::raster::threshold;

use crate::error::{ModelError, Result};
use crate::net::Model;

pub const DEFAULT_WINDOW: usize = 160;
pub const DEFAULT_STRIDE: usize = 80;

/// Anything that maps an `N x 5 x H x W` feature batch to `N x 1 x H x W` probabilities.
pub trait Predictor: Sync {
    fn predict_batch(&self, input: &Tensor<f32>) -> Result<Tensor<f32>>;

    /// Window sizes must be multiples of this.
    fn size_divisor(&self) -> usize {
        1
    }
}

impl Predictor for Model {
    fn predict_batch(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict(input)
    }

    fn size_divisor(&self) -> usize {
        self.config().size_divisor()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    #[default]
    Hann,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub window: usize,
    pub stride: usize,
    pub tta: Vec<Dihedral>,
    pub blend: Blend,
    /// Samples per forward pass.
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            tta: Dihedral::ALL.to_vec(),
            blend: Blend::Hann,
            batch_size: 8,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self, divisor: usize) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.window == 0 || self.window % divisor != 0 {
            return bad(format!(
                "window {} must be a positive multiple of {divisor}",
                self.window
            ));
        }
        if self.stride == 0 || self.stride > self.window {
            return bad(format!("stride {} must lie in 1..={}", self.stride, self.window));
        }
        if self.tta.is_empty() {
            return bad("TTA set must not be empty".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Per-index blending weights. Hann uses `sin^2(pi (i + 0.5) / n)`, positive at every
/// index; at half-window stride overlapping weights sum to one. The second half is
/// mirrored from the first so the window is exactly symmetric.
pub fn window_weights(n: usize, blend: Blend) -> Vec<f64> {
    match blend {
        Blend::Uniform => vec![1.0; n],
        Blend::Hann => {
            let mut w = vec![0.0; n];
            for i in 0..n.div_ceil(2) {
                let s = (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin();
                w[i] = s * s;
                w[n - 1 - i] = s * s;
            }
            w
        }
    }
}

/// Window origins along an axis of padded length `len`: the stride progression from
/// 0 and its mirror image from `len - window`, merged.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    assert!(window <= len && stride > 0);
    let last = len - window;
    let mut v: Vec<usize> = (0..=last)
        .step_by(stride)
        .chain((0..=last).step_by(stride).map(|s| last - s))
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Mirror index for reflect padding (edge pixel not repeated).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// `v_min + sum_k (w_k / W) (v_k - v_min)` over contributions sorted by value then weight.
fn offset_mean(contribs: &mut [(f64, f64)]) -> f64 {
    contribs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let base = contribs[0].0;
    let total: f64 = contribs.iter().map(|c| c.1).sum();
    base + contribs.iter().map(|&(v, w)| (w / total) * (v - base)).sum::<f64>()
}

struct Layout {
    pad: usize,
    ys: Vec<usize>,
    xs: Vec<usize>,
}

fn layout(h: usize, w: usize, cfg: &InferenceConfig) -> Layout {
    let needed = |n: usize| cfg.window.saturating_sub(n).div_ceil(2);
    let pad = (cfg.window - cfg.stride).max(needed(h)).max(needed(w));
    Layout {
        pad,
        ys: window_starts(h + 2 * pad, cfg.window, cfg.stride),
        xs: window_starts(w + 2 * pad, cfg.window, cfg.stride),
    }
}

/// TTA-averaged probabilities of one window, row-major `window x window`.
fn predict_window(predictor: &dyn Predictor, patch: &[f32], cfg: &InferenceConfig) -> Result<Vec<f64>> {
    let w = cfg.window;
    let n = w * w;
    let mut outputs: Vec<Vec<f32>> = Vec::with_capacity(cfg.tta.len());
    for group in cfg.tta.chunks(cfg.batch_size) {
        let mut data = Vec::with_capacity(group.len() * N_FEATURES * n);
        for t in group {
            data.extend(t.apply_planes(patch, N_FEATURES, w, w));
        }
        let batch = Tensor::new(Shape::new(group.len(), N_FEATURES, w, w), data)?;
        let prob = predictor.predict_batch(&batch)?;
        if prob.shape() != Shape::new(group.len(), 1, w, w) {
            return Err(ModelError::Input(format!(
                "predictor returned {} for a {w}x{w} window",
                prob.shape()
            )));
        }
        for (i, t) in group.iter().enumerate() {
            outputs.push(t.inverse().apply(prob.sample(i), w, w));
        }
    }
    let mut buf = vec![(0.0, 1.0); outputs.len()];
    Ok((0..n)
        .map(|i| {
            for (b, o) in buf.iter_mut().zip(&outputs) {
                *b = (o[i] as f64, 1.0);
            }
            offset_mean(&mut buf)
        })
        .collect())
}

/// Probability raster for a whole scene. Pixels where any feature is nodata are nodata.
pub fn predict_scene(predictor: &dyn Predictor, features: &FeatureStack, cfg: &InferenceConfig) -> Result<Raster> {
    cfg.validate(predictor.size_divisor())?;
    let grid = *features.grid();
    let (h, w) = (grid.height, grid.width);
    let (dense, valid) = features.dense();
    let lay = layout(h, w, cfg);
    let win = cfg.window;
    let pad = lay.pad as isize;

    let origins: Vec<(usize, usize)> = lay
        .ys
        .iter()
        .flat_map(|&y| lay.xs.iter().map(move |&x| (y, x)))
        .collect();
    let windows: Vec<Vec<f64>> = origins
        .par_iter()
        .map(|&(y0, x0)| {
            let mut patch = Vec::with_capacity(N_FEATURES * win * win);
            for ch in 0..N_FEATURES {
                let plane = &dense[ch * h * w..(ch + 1) * h * w];
                for r in 0..win {
                    let sr = reflect_index((y0 + r) as isize - pad, h);
                    for c in 0..win {
                        let sc = reflect_index((x0 + c) as isize - pad, w);
                        patch.push(plane[sr * w + sc]);
                    }
                }
            }
            predict_window(predictor, &patch, cfg)
        })
        .collect::<Result<_>>()?;

    let wts = window_weights(win, cfg.blend);
    // For each padded coordinate, the (window index along the axis, local offset) pairs covering it.
    let cover = |starts: &[usize], p: usize| -> Vec<(usize, usize)> {
        starts
            .iter()
            .enumerate()
            .filter(|(_, &s)| s <= p && p < s + win)
            .map(|(k, &s)| (k, p - s))
            .collect()
    };
    let row_cover: Vec<_> = (0..h).map(|r| cover(&lay.ys, r + lay.pad)).collect();
    let col_cover: Vec<_> = (0..w).map(|c| cover(&lay.xs, c + lay.pad)).collect();
    let nx = lay.xs.len();

    let nodata = DEFAULT_NODATA as f32;
    let mut out = vec![nodata; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        let mut contribs = Vec::new();
        for (c, o) in row.iter_mut().enumerate() {
            if !valid[r * w + c] {
                continue;
            }
            contribs.clear();
            for &(wy, ly) in &row_cover[r] {
                for &(wx, lx) in &col_cover[c] {
                    let v = windows[wy * nx + wx][ly * win + lx];
                    contribs.push((v, wts[ly] * wts[lx]));
                }
            }
            *o = offset_mean(&mut contribs) as f32;
        }
    });
    let mut g = grid;
    g.nodata = DEFAULT_NODATA;
    Ok(Raster::new(g, 1, out)?)
}

/// Sum of unnormalized blending weights at each scene pixel, for partition checks.
pub fn blend_weight_sums(h: usize, w: usize, cfg: &InferenceConfig) -> Vec<f64> {
    let lay = layout(h, w, cfg);
    let wts = window_weights(cfg.window, cfg.blend);
    let axis = |starts: &[usize], p: usize| -> f64 {
        starts
            .iter()
            .filter(|&&s| s <= p && p < s + cfg.window)
            .map(|&s| wts[p - s])
            .sum()
    };
    let ry: Vec<f64> = (0..h).map(|r| axis(&lay.ys, r + lay.pad)).collect();
    let rx: Vec<f64> = (0..w).map(|c| axis(&lay.xs, c + lay.pad)).collect();
    ry.iter().flat_map(|a| rx.iter().map(move |b| a * b)).collect()
}
