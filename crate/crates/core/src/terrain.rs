//! DEM derivatives: slope, release zones and the potential angle of reach (PAR).
//!
//! PAR at a target pixel is the largest elevation angle, seen from the target,
//! of any release-zone pixel: `max atan((z_release - z_target) / horizontal_distance)`,
//! clamped below at 0 degrees.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const DEFAULT_RELEASE_BAND: (f64, f64) = (35.0, 45.0);
pub const DEFAULT_PAR_RADIUS_M: f64 = 2000.0;

/// Largest f32 strictly below 90 degrees.
const MAX_ANGLE_DEG: f32 = 89.999_99;

/// Slope angle in degrees, `[0, 90)`.
#[derive(Debug, Clone)]
pub struct SlopeField(pub Raster);

/// 1 for potential release pixels, 0 elsewhere, nodata where slope is unknown.
#[derive(Debug, Clone)]
pub struct ReleaseMask(pub Raster);

/// Potential angle of reach in degrees, `[0, 90)`.
#[derive(Debug, Clone)]
pub struct ParField {
    pub raster: Raster,
    pub radius_m: f64,
}

impl SlopeField {
    pub fn raster(&self) -> &Raster {
        &self.0
    }
}

impl ReleaseMask {
    pub fn raster(&self) -> &Raster {
        &self.0
    }

    fn is_release(&self, i: usize) -> bool {
        self.0.data()[i] == 1.0
    }
}

/// Horn (3x3, 8-neighbour) slope in degrees with edge replication at the border.
pub fn slope_deg(dem: &Raster, spacing: f64) -> Result<SlopeField> {
    if dem.bands() != 1 {
        return Err(Error::Dimension("slope expects a single-band DEM".into()));
    }
    if !(spacing > 0.0) {
        return Err(Error::Argument(format!("spacing must be > 0, got {spacing}")));
    }
    let (w, h) = (dem.width(), dem.height());
    let nodata = dem.nodata();
    let z = dem.band(0);
    let mut out = vec![nodata; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        for (c, slot) in row.iter_mut().enumerate() {
            let mut win = [0.0f64; 9];
            let mut valid = true;
            for (k, v) in win.iter_mut().enumerate() {
                let rr = (r as isize + k as isize / 3 - 1).clamp(0, h as isize - 1) as usize;
                let cc = (c as isize + k as isize % 3 - 1).clamp(0, w as isize - 1) as usize;
                let s = z[rr * w + cc];
                if s == nodata {
                    valid = false;
                    break;
                }
                *v = s as f64;
            }
            if !valid {
                continue;
            }
            let [a, b, cc, d, _, f, g, hh, i] = win;
            let dzdx = ((cc + 2.0 * f + i) - (a + 2.0 * d + g)) / (8.0 * spacing);
            let dzdy = ((g + 2.0 * hh + i) - (a + 2.0 * b + cc)) / (8.0 * spacing);
            let deg = dzdx.hypot(dzdy).atan().to_degrees() as f32;
            *slot = deg.min(MAX_ANGLE_DEG);
        }
    });
    Ok(SlopeField(Raster::new(*dem.grid(), 1, out)?))
}

/// Marks pixels whose slope lies in `[band.0, band.1]`.
pub fn release_mask(slope: &SlopeField, band: (f64, f64)) -> Result<ReleaseMask> {
    if !(band.0 < band.1) {
        return Err(Error::Argument(format!(
            "release band [{}, {}] is empty",
            band.0, band.1
        )));
    }
    let r = slope.0.map_valid(|s| {
        let s = s as f64;
        if s >= band.0 && s <= band.1 {
            1.0
        } else {
            0.0
        }
    })?;
    Ok(ReleaseMask(r))
}

fn check_pair(dem: &Raster, release: &ReleaseMask) -> Result<()> {
    crate::raster::assert_aligned([dem, release.raster()])?;
    if dem.bands() != 1 || release.raster().bands() != 1 {
        return Err(Error::Dimension("PAR expects single-band inputs".into()));
    }
    Ok(())
}

#[inline]
fn horizontal_distance(dr: isize, dc: isize, sx: f64, sy: f64) -> f64 {
    (dc as f64 * sx).hypot(dr as f64 * sy)
}

/// PAR at one pixel by scanning every release pixel in the raster.
pub fn par_brute(dem: &Raster, release: &ReleaseMask, target: (usize, usize)) -> Result<f64> {
    check_pair(dem, release)?;
    let (w, h) = (dem.width(), dem.height());
    let (tr, tc) = target;
    if tr >= h || tc >= w {
        return Err(Error::Argument(format!("target {target:?} outside {w}x{h}")));
    }
    let z = dem.band(0);
    let zt = z[tr * w + tc];
    if dem.is_nodata(zt) {
        return Err(Error::Argument(format!("target {target:?} is nodata")));
    }
    let (sx, sy) = (dem.grid().spacing_x(), dem.grid().spacing_y());
    let mut best = 0.0f64;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if (r, c) == target || !release.is_release(i) || dem.is_nodata(z[i]) {
                continue;
            }
            let d = horizontal_distance(r as isize - tr as isize, c as isize - tc as isize, sx, sy);
            let angle = ((z[i] as f64 - zt as f64) / d).atan().to_degrees();
            best = best.max(angle);
        }
    }
    Ok(best)
}

/// PAR for every pixel, considering release pixels within `radius_m` (center to center).
pub fn par_field(dem: &Raster, release: &ReleaseMask, radius_m: f64) -> Result<ParField> {
    check_pair(dem, release)?;
    let grid = *dem.grid();
    let (sx, sy) = (grid.spacing_x(), grid.spacing_y());
    if !(radius_m >= sx.min(sy)) {
        return Err(Error::Argument(format!(
            "radius {radius_m} m is smaller than the pixel spacing"
        )));
    }
    let (w, h) = (grid.width, grid.height);
    let z = dem.band(0);
    let nodata = dem.nodata();

    // Release pixels bucketed by row, each row sorted by column.
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if release.is_release(i) && z[i] != nodata {
                rows[r].push((c, z[i] as f64));
            }
        }
    }
    let reach_r = ((radius_m / sy).floor() as usize).min(h);
    let reach_c = ((radius_m / sx).floor() as usize).min(w);

    let mut out = vec![nodata; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(tr, row_out)| {
        let r0 = tr.saturating_sub(reach_r);
        let r1 = (tr + reach_r).min(h - 1);
        for (tc, slot) in row_out.iter_mut().enumerate() {
            let zt = z[tr * w + tc];
            if zt == nodata {
                continue;
            }
            let zt = zt as f64;
            let c0 = tc.saturating_sub(reach_c);
            let c1 = tc + reach_c;
            let mut best_ratio = 0.0f64;
            for (r, bucket) in rows.iter().enumerate().take(r1 + 1).skip(r0) {
                let start = bucket.partition_point(|&(c, _)| c < c0);
                for &(c, zr) in &bucket[start..] {
                    if c > c1 {
                        break;
                    }
                    if zr <= zt || (r == tr && c == tc) {
                        continue;
                    }
                    let d = horizontal_distance(r as isize - tr as isize, c as isize - tc as isize, sx, sy);
                    if d > radius_m {
                        continue;
                    }
                    let ratio = (zr - zt) / d;
                    if ratio > best_ratio {
                        best_ratio = ratio;
                    }
                }
            }
            *slot = best_ratio.atan().to_degrees() as f32;
        }
    });
    Ok(ParField {
        raster: Raster::new(grid, 1, out)?,
        radius_m,
    })
}

/// Maps angles in `[0, 90)` degrees to `[0, 1)`.
pub fn normalize_angle(angles: &Raster) -> Result<Raster> {
    let nodata = angles.nodata();
    if let Some(i) = angles
        .data()
        .iter()
        .position(|&v| v != nodata && !(0.0..90.0).contains(&v))
    {
        return Err(Error::Value {
            index: i,
            detail: format!("angle {} outside [0, 90)", angles.data()[i]),
        });
    }
    angles.map_valid(|v| v / 90.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{GeoTransform, RasterGrid, DEFAULT_NODATA};

    fn grid(w: usize, h: usize, spacing: f64) -> RasterGrid {
        RasterGrid::new(w, h, GeoTransform::north_up(0.0, 0.0, spacing), DEFAULT_NODATA).unwrap()
    }

    #[test]
    fn plane_slope_is_45() {
        let dem = Raster::from_fn(grid(8, 8, 1.0), |_, c| c as f32).unwrap();
        let s = slope_deg(&dem, 1.0).unwrap();
        for r in 1..7 {
            for c in 1..7 {
                assert!((s.0.get(r, c) - 45.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn flat_dem_has_zero_slope() {
        let dem = Raster::filled(grid(5, 4, 20.0), 300.0);
        let s = slope_deg(&dem, 20.0).unwrap();
        assert!(s.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slope_nodata_window() {
        let nd = DEFAULT_NODATA as f32;
        let mut data = vec![10.0f32; 25];
        data[12] = nd;
        let dem = Raster::new(grid(5, 5, 20.0), 1, data).unwrap();
        let s = slope_deg(&dem, 20.0).unwrap();
        assert_eq!(s.0.get(1, 1), nd);
        assert_eq!(s.0.get(2, 2), nd);
        assert_eq!(s.0.get(0, 0), 0.0);
    }

    #[test]
    fn release_band() {
        let nd = DEFAULT_NODATA as f32;
        let slope = SlopeField(Raster::new(grid(4, 1, 20.0), 1, vec![40.0, 20.0, nd, 35.0]).unwrap());
        let m = release_mask(&slope, DEFAULT_RELEASE_BAND).unwrap();
        assert_eq!(m.0.data(), &[1.0, 0.0, nd, 1.0]);
        assert!(release_mask(&slope, (45.0, 35.0)).is_err());
    }

    fn mask_from(w: usize, h: usize, spacing: f64, ones: &[(usize, usize)]) -> ReleaseMask {
        let mut data = vec![0.0; w * h];
        for &(r, c) in ones {
            data[r * w + c] = 1.0;
        }
        ReleaseMask(Raster::new(grid(w, h, spacing), 1, data).unwrap())
    }

    #[test]
    fn par_single_release_45() {
        let mut data = vec![0.0f32; 3];
        data[0] = 100.0;
        let dem = Raster::new(grid(3, 1, 100.0), 1, data).unwrap();
        let mask = mask_from(3, 1, 100.0, &[(0, 0)]);
        let a = par_brute(&dem, &mask, (0, 1)).unwrap();
        assert!((a - 45.0).abs() < 1e-12);
    }

    #[test]
    fn par_empty_and_below() {
        let dem = Raster::new(grid(2, 1, 100.0), 1, vec![0.0, 50.0]).unwrap();
        let empty = mask_from(2, 1, 100.0, &[]);
        assert_eq!(par_brute(&dem, &empty, (0, 0)).unwrap(), 0.0);
        let below = mask_from(2, 1, 100.0, &[(0, 0)]);
        assert_eq!(par_brute(&dem, &below, (0, 1)).unwrap(), 0.0);
    }

    #[test]
    fn par_field_flat_is_zero() {
        let dem = Raster::filled(grid(16, 16, 20.0), 500.0);
        let slope = slope_deg(&dem, 20.0).unwrap();
        let mask = release_mask(&slope, DEFAULT_RELEASE_BAND).unwrap();
        let par = par_field(&dem, &mask, 2000.0).unwrap();
        assert!(par.raster.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn par_field_rejects_tiny_radius() {
        let dem = Raster::filled(grid(4, 4, 20.0), 0.0);
        let mask = mask_from(4, 4, 20.0, &[]);
        assert!(par_field(&dem, &mask, 10.0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let nd = DEFAULT_NODATA as f32;
        let r = Raster::new(grid(3, 1, 20.0), 1, vec![45.0, 0.0, nd]).unwrap();
        assert_eq!(normalize_angle(&r).unwrap().data(), &[0.5, 0.0, nd]);
        let bad = Raster::new(grid(1, 1, 20.0), 1, vec![90.0]).unwrap();
        assert!(normalize_angle(&bad).is_err());
    }
}
