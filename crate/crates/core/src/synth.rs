//! Deterministic synthetic scenes.
//!
//! All randomness comes from a seeded ChaCha stream consumed in a fixed order,
//! and transcendental functions go through `libm`, so outputs are byte-identical
//! across runs and platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::radiometry::SceneStack;
use crate::raster::{GeoTransform, Raster, RasterGrid, DEFAULT_NODATA};
use crate::terrain::{par_field, release_mask, slope_deg, DEFAULT_PAR_RADIUS_M, DEFAULT_RELEASE_BAND};

pub const SYNTH_SPACING_M: f64 = 20.0;
pub const SYNTH_ORIGIN: (f64, f64) = (500_000.0, 7_700_000.0);
pub const DEFAULT_SIZE: usize = 256;
pub const DEFAULT_RELIEF_M: f64 = 1500.0;

/// Parameters of the backscatter model, in dB.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackscatterModel {
    pub vv_mean_db: f64,
    pub vh_mean_db: f64,
    /// Amplitude of the smooth spatial variation.
    pub texture_db: f64,
    /// Lattice spacing of the smooth variation, pixels.
    pub texture_cell: usize,
    /// Standard deviation of per-acquisition speckle.
    pub speckle_db: f64,
    /// Range of the backscatter increase over debris.
    pub debris_gain_db: (f64, f64),
    /// Semi-axes of the elliptical debris footprint, pixels.
    pub debris_length_px: (f64, f64),
    pub debris_width_px: (f64, f64),
}

impl Default for BackscatterModel {
    fn default() -> Self {
        Self {
            vv_mean_db: -12.0,
            vh_mean_db: -19.0,
            texture_db: 2.5,
            texture_cell: 16,
            speckle_db: 0.8,
            debris_gain_db: (3.0, 8.0),
            debris_length_px: (5.0, 11.0),
            debris_width_px: (2.0, 4.0),
        }
    }
}

/// Where a debris deposit was planted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedAvalanche {
    pub row: usize,
    pub col: usize,
    pub pixels: usize,
    pub gain_vv_db: f64,
    pub gain_vh_db: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// Backscatter channels in linear power.
    pub scene: SceneStack,
    pub avalanches: Vec<PlantedAvalanche>,
}

fn synth_grid(size: usize) -> Result<RasterGrid> {
    RasterGrid::new(
        size,
        size,
        GeoTransform::north_up(SYNTH_ORIGIN.0, SYNTH_ORIGIN.1, SYNTH_SPACING_M),
        DEFAULT_NODATA,
    )
}

/// Mountain terrain built from seeded cosine bumps, rescaled to span `relief` meters.
pub fn synth_dem(seed: u64, size: usize, relief: f64) -> Result<Raster> {
    if size < 8 {
        return Err(Error::Argument(format!("size {size} too small (min 8)")));
    }
    if !(relief >= 0.0) || !relief.is_finite() {
        return Err(Error::Argument(format!("relief must be >= 0, got {relief}")));
    }
    let grid = synth_grid(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0d3d_0d3d);
    let s = size as f64;
    let n_bumps = 6 + (size * size) / 2048;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            let cy = rng.gen_range(-0.1..1.1) * s;
            let cx = rng.gen_range(-0.1..1.1) * s;
            let radius = rng.gen_range(0.12..0.3) * s;
            let amp = rng.gen_range(-0.4..1.0);
            (cy, cx, radius, amp)
        })
        .collect();
    let tilt = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));

    let mut z = vec![0.0f64; size * size];
    for r in 0..size {
        for c in 0..size {
            let mut v = tilt.0 * r as f64 / s + tilt.1 * c as f64 / s;
            for &(cy, cx, radius, amp) in &bumps {
                let d = libm::hypot(r as f64 - cy, c as f64 - cx);
                if d < radius {
                    v += amp * 0.5 * (1.0 + libm::cos(std::f64::consts::PI * d / radius));
                }
            }
            z[r * size + c] = v;
        }
    }
    let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { relief / (hi - lo) } else { 0.0 };
    let data = z.iter().map(|&v| ((v - lo) * scale) as f32).collect();
    Raster::new(grid, 1, data)
}

/// Approximately Gaussian noise from the sum of four uniforms (no transcendental calls).
fn gaussish(rng: &mut ChaCha8Rng) -> f64 {
    let s: f64 = (0..4).map(|_| rng.gen::<f64>() - 0.5).sum();
    s * 3.0f64.sqrt()
}

/// Smooth value noise in roughly `[-1, 1]`: random lattice values, bilinear in between.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let cell = cell.max(1);
    let (lh, lw) = (h / cell + 2, w / cell + 2);
    let lattice: Vec<f64> = (0..lh * lw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let fy = r as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        for c in 0..w {
            let fx = c as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let at = |y: usize, x: usize| lattice[y * lw + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Plants `n_avalanches` debris deposits downslope of release terrain and simulates
/// reference/activity backscatter with the default [`BackscatterModel`].
pub fn synth_scene(seed: u64, dem: &Raster, n_avalanches: usize) -> Result<SyntheticScene> {
    synth_scene_with(seed, dem, n_avalanches, &BackscatterModel::default())
}

pub fn synth_scene_with(
    seed: u64,
    dem: &Raster,
    n_avalanches: usize,
    model: &BackscatterModel,
) -> Result<SyntheticScene> {
    let grid = *dem.grid();
    let (w, h) = (grid.width, grid.height);
    let spacing = grid.spacing_x();
    let slope = slope_deg(dem, spacing)?;
    let release = release_mask(&slope, DEFAULT_RELEASE_BAND)?;
    let par = par_field(dem, &release, DEFAULT_PAR_RADIUS_M)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = model.debris_length_px.1.ceil() as usize + 2;

    let mut candidates = Vec::new();
    for r in margin..h.saturating_sub(margin) {
        for c in margin..w.saturating_sub(margin) {
            let (Some(p), Some(s)) = (par.raster.value(r, c), slope.0.value(r, c)) else {
                continue;
            };
            if p > 0.0 && s < 30.0 && release.0.get(r, c) == 0.0 {
                candidates.push((r, c));
            }
        }
    }

    let mut labels = vec![0.0f32; w * h];
    // Debris pixels dilated by two, so planted deposits stay separate components.
    let mut blocked = vec![false; w * h];
    let mut gains: Vec<(f64, f64)> = Vec::new();
    let mut avalanches = Vec::new();
    let z = dem.band(0);
    let max_attempts = 200 * n_avalanches.max(1);
    let mut attempts = 0;
    while avalanches.len() < n_avalanches {
        if candidates.is_empty() || attempts >= max_attempts {
            return Err(Error::Argument(format!(
                "could only place {} of {} avalanches",
                avalanches.len(),
                n_avalanches
            )));
        }
        attempts += 1;
        let (cr, cc) = candidates[rng.gen_range(0..candidates.len())];
        let a = rng.gen_range(model.debris_length_px.0..=model.debris_length_px.1);
        let b = rng.gen_range(model.debris_width_px.0..=model.debris_width_px.1);
        let gain_vv = rng.gen_range(model.debris_gain_db.0..=model.debris_gain_db.1);
        let gain_vh = rng.gen_range(model.debris_gain_db.0..=model.debris_gain_db.1);

        // Long axis along the local fall line.
        let zc = |r: usize, c: usize| z[r * w + c] as f64;
        let gx = zc(cr, cc + 1) - zc(cr, cc - 1);
        let gy = zc(cr + 1, cc) - zc(cr - 1, cc);
        let norm = libm::hypot(gx, gy);
        let (ux, uy) = if norm > 0.0 { (gx / norm, gy / norm) } else { (1.0, 0.0) };

        let reach = a.ceil() as isize;
        let mut pixels = Vec::new();
        let mut ok = true;
        'scan: for dr in -reach..=reach {
            for dc in -reach..=reach {
                let along = dc as f64 * ux + dr as f64 * uy;
                let across = -dc as f64 * uy + dr as f64 * ux;
                let (u, v) = (along / a, across / b);
                if u * u + v * v > 1.0 {
                    continue;
                }
                let (r, c) = (cr as isize + dr, cc as isize + dc);
                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                    ok = false;
                    break 'scan;
                }
                let i = r as usize * w + c as usize;
                if blocked[i] || dem.is_nodata(z[i]) {
                    ok = false;
                    break 'scan;
                }
                pixels.push(i);
            }
        }
        if !ok || pixels.is_empty() {
            continue;
        }
        let id = avalanches.len() as f32 + 1.0;
        for &i in &pixels {
            labels[i] = id;
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -2..=2isize {
                for dc in -2..=2isize {
                    let (rr, cc2) = (r + dr, c + dc);
                    if rr >= 0 && cc2 >= 0 && rr < h as isize && cc2 < w as isize {
                        blocked[rr as usize * w + cc2 as usize] = true;
                    }
                }
            }
        }
        gains.push((gain_vv, gain_vh));
        avalanches.push(PlantedAvalanche {
            row: cr,
            col: cc,
            pixels: pixels.len(),
            gain_vv_db: gain_vv,
            gain_vh_db: gain_vh,
        });
    }

    let n = w * h;
    let vv_texture = value_noise(&mut rng, h, w, model.texture_cell);
    let vh_texture = value_noise(&mut rng, h, w, model.texture_cell);
    let mut channels = [vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]];
    for i in 0..n {
        let base_vv = model.vv_mean_db + model.texture_db * vv_texture[i];
        let base_vh = model.vh_mean_db + model.texture_db * vh_texture[i];
        let (gvv, gvh) = match labels[i] as usize {
            0 => (0.0, 0.0),
            id => gains[id - 1],
        };
        let db = [
            base_vv + model.speckle_db * gaussish(&mut rng),
            base_vv + gvv + model.speckle_db * gaussish(&mut rng),
            base_vh + model.speckle_db * gaussish(&mut rng),
            base_vh + gvh + model.speckle_db * gaussish(&mut rng),
        ];
        for (ch, v) in channels.iter_mut().zip(db) {
            ch[i] = libm::exp10(v / 10.0) as f32;
        }
    }
    for v in labels.iter_mut() {
        *v = if *v > 0.0 { 1.0 } else { 0.0 };
    }
    let [vv_ref, vv_act, vh_ref, vh_act] = channels;
    let scene = SceneStack::new(
        Raster::new(grid, 1, vv_ref)?,
        Raster::new(grid, 1, vv_act)?,
        Raster::new(grid, 1, vh_ref)?,
        Raster::new(grid, 1, vh_act)?,
        dem.clone(),
        Some(Raster::new(grid, 1, labels)?),
    )?;
    Ok(SyntheticScene { scene, avalanches })
}
