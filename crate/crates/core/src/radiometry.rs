//! Backscatter scaling and SAR change features.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{assert_aligned, Raster};

pub const DB_MIN: f64 = -25.0;
pub const DB_MAX: f64 = -5.0;

/// Co- and cross-polarized reference/activity backscatter, the DEM and optional labels.
#[derive(Debug, Clone)]
pub struct SceneStack {
    pub vv_ref: Raster,
    pub vv_act: Raster,
    pub vh_ref: Raster,
    pub vh_act: Raster,
    pub dem: Raster,
    pub labels: Option<Raster>,
}

impl SceneStack {
    pub fn new(
        vv_ref: Raster,
        vv_act: Raster,
        vh_ref: Raster,
        vh_act: Raster,
        dem: Raster,
        labels: Option<Raster>,
    ) -> Result<Self> {
        let scene = Self {
            vv_ref,
            vv_act,
            vh_ref,
            vh_act,
            dem,
            labels,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let mut all = vec![&self.vv_ref, &self.vv_act, &self.vh_ref, &self.vh_act, &self.dem];
        if let Some(labels) = &self.labels {
            all.push(labels);
        }
        if let Some(r) = all.iter().find(|r| r.bands() != 1) {
            return Err(Error::Dimension(format!(
                "scene rasters must be single-band, found {} bands",
                r.bands()
            )));
        }
        assert_aligned(all.iter().copied())?;
        if let Some(labels) = &self.labels {
            if let Some(i) = labels
                .data()
                .iter()
                .position(|&v| v != 0.0 && v != 1.0 && !labels.is_nodata(v))
            {
                return Err(Error::Value {
                    index: i,
                    detail: format!("label {} is not in {{0, 1, nodata}}", labels.data()[i]),
                });
            }
        }
        Ok(())
    }

    /// Converts the four backscatter channels with `f`, keeping DEM and labels.
    pub fn map_channels(&self, mut f: impl FnMut(&Raster) -> Result<Raster>) -> Result<Self> {
        Self::new(
            f(&self.vv_ref)?,
            f(&self.vv_act)?,
            f(&self.vh_ref)?,
            f(&self.vh_act)?,
            self.dem.clone(),
            self.labels.clone(),
        )
    }
}

/// Change features, each unit-range: `d_vv`, `d_vh` store signed differences as `(d + 1) / 2`.
#[derive(Debug, Clone)]
pub struct FeatureTriplet {
    pub d_vv: Raster,
    pub d_vh: Raster,
    pub vvvh: Raster,
}

/// Converts linear power to dB and clips to `[lo, hi]`.
pub fn to_db_clip(sigma0: &Raster, lo: f64, hi: f64) -> Result<Raster> {
    if !(lo < hi) {
        return Err(Error::Argument(format!("clip range [{lo}, {hi}] is empty")));
    }
    let nodata = sigma0.nodata();
    if let Some(i) = sigma0.data().iter().position(|&v| v != nodata && !(v > 0.0)) {
        return Err(Error::Value {
            index: i,
            detail: format!("backscatter {} is not positive", sigma0.data()[i]),
        });
    }
    sigma0.map_valid(|v| db_clip_value(v, lo, hi))
}

#[inline]
pub(crate) fn db_clip_value(v: f32, lo: f64, hi: f64) -> f32 {
    (10.0 * (v as f64).log10()).clamp(lo, hi) as f32
}

/// Maps dB values in `[lo, hi]` affinely onto `[0, 1]`.
pub fn rescale_unit(db: &Raster, lo: f64, hi: f64) -> Result<Raster> {
    if !(lo < hi) {
        return Err(Error::Argument(format!("range [{lo}, {hi}] is empty")));
    }
    let nodata = db.nodata();
    if let Some(i) = db
        .data()
        .iter()
        .position(|&v| v != nodata && !((v as f64) >= lo && (v as f64) <= hi))
    {
        return Err(Error::Value {
            index: i,
            detail: format!("{} dB outside [{lo}, {hi}]", db.data()[i]),
        });
    }
    db.map_valid(|v| ((v as f64 - lo) / (hi - lo)) as f32)
}

/// Computes the three change features from a unit-scaled scene.
pub fn change_features(scene: &SceneStack) -> Result<FeatureTriplet> {
    let channels = [&scene.vv_ref, &scene.vv_act, &scene.vh_ref, &scene.vh_act];
    assert_aligned(channels)?;
    let grid = *scene.vv_ref.grid();
    let nodata = grid.nodata_f32();
    let n = grid.len();
    let (mut d_vv, mut d_vh, mut vvvh) = (vec![nodata; n], vec![nodata; n], vec![nodata; n]);
    let src = channels.map(|r| r.band(0));
    for i in 0..n {
        let vals = [src[0][i], src[1][i], src[2][i], src[3][i]];
        if vals.contains(&nodata) {
            continue;
        }
        if let Some(&bad) = vals.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Value {
                index: i,
                detail: format!("channel value {bad} is not unit-scaled"),
            });
        }
        let (a, b, c) = change_at(vals[0], vals[1], vals[2], vals[3]);
        d_vv[i] = a;
        d_vh[i] = b;
        vvvh[i] = c;
    }
    Ok(FeatureTriplet {
        d_vv: Raster::new(grid, 1, d_vv)?,
        d_vh: Raster::new(grid, 1, d_vh)?,
        vvvh: Raster::new(grid, 1, vvvh)?,
    })
}

#[inline]
fn change_at(vv_ref: f32, vv_act: f32, vh_ref: f32, vh_act: f32) -> (f32, f32, f32) {
    let dvv = vv_act as f64 - vv_ref as f64;
    let dvh = vh_act as f64 - vh_ref as f64;
    (
        ((dvv + 1.0) / 2.0) as f32,
        ((dvh + 1.0) / 2.0) as f32,
        (dvv * dvv * (dvh * dvh)) as f32,
    )
}

/// Full radiometric chain for a linear-power scene: dB, clip, unit scaling.
pub fn unit_scale_scene(scene: &SceneStack) -> Result<SceneStack> {
    scene.map_channels(|r| rescale_unit(&to_db_clip(r, DB_MIN, DB_MAX)?, DB_MIN, DB_MAX))
}

fn to_byte(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes an 8-bit RGB change composite: R = B = reference, G = activity.
pub fn rgb_composite(vv_ref: &Raster, vv_act: &Raster, path: impl AsRef<Path>) -> Result<()> {
    assert_aligned([vv_ref, vv_act])?;
    let path = path.as_ref();
    let (w, h) = (vv_ref.width(), vv_ref.height());
    let mut pixels = Vec::with_capacity(w * h * 3);
    for (&r, &g) in vv_ref.band(0).iter().zip(vv_act.band(0)) {
        let rb = if vv_ref.is_nodata(r) { 0 } else { to_byte(r) };
        let g = if vv_act.is_nodata(g) { 0 } else { to_byte(g) };
        pixels.extend_from_slice(&[rb, g, rb]);
    }
    write_png_rgb(path, w, h, &pixels)
}

pub(crate) fn write_png_rgb(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(pixels).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Writes a grayscale quicklook of a unit-range raster (nodata as 0).
pub fn write_gray_png(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let pixels: Vec<u8> = raster
        .band(0)
        .iter()
        .flat_map(|&v| {
            let b = if raster.is_nodata(v) { 0 } else { to_byte(v) };
            [b, b, b]
        })
        .collect();
    write_png_rgb(path, raster.width(), raster.height(), &pixels)
}
