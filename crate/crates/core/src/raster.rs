//! Georeferenced raster model and the AVRS container format.
//!
//! An AVRS file is a fixed little-endian header followed by band-sequential,
//! row-major `f32` samples:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `AVRS`                            |
//! | 4      | 2    | version (`u16`, 1)                      |
//! | 6      | 2    | flags (`u16`, 0)                        |
//! | 8      | 4    | width (`u32`)                           |
//! | 12     | 4    | height (`u32`)                          |
//! | 16     | 2    | bands (`u16`)                           |
//! | 18     | 1    | dtype (`u8`, 0 = f32)                   |
//! | 19     | 1    | pad                                     |
//! | 20     | 48   | geotransform, 6 x `f64`                 |
//! | 68     | 8    | nodata (`f64`)                          |
//! | 76     | 52   | zero padding up to [`HEADER_LEN`]       |
//! | 128    | ...  | samples                                 |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVRS";
pub const VERSION: u16 = 1;
/// Header fields occupy 76 bytes; the header is zero-padded to the next 64-byte boundary.
pub const HEADER_LEN: usize = 128;
pub const DTYPE_F32: u8 = 0;
pub const DEFAULT_NODATA: f64 = -9999.0;

/// Affine pixel-to-world transform in GDAL order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub pixel_dx: f64,
    pub row_rot: f64,
    pub origin_y: f64,
    pub col_rot: f64,
    pub pixel_dy: f64,
}

impl GeoTransform {
    /// North-up transform with square pixels of `spacing` meters.
    pub fn north_up(origin_x: f64, origin_y: f64, spacing: f64) -> Self {
        Self {
            origin_x,
            pixel_dx: spacing,
            row_rot: 0.0,
            origin_y,
            col_rot: 0.0,
            pixel_dy: -spacing,
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        [
            self.origin_x,
            self.pixel_dx,
            self.row_rot,
            self.origin_y,
            self.col_rot,
            self.pixel_dy,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            origin_x: a[0],
            pixel_dx: a[1],
            row_rot: a[2],
            origin_y: a[3],
            col_rot: a[4],
            pixel_dy: a[5],
        }
    }

    /// World coordinates of a (fractional) pixel corner position.
    pub fn world(&self, col: f64, row: f64) -> (f64, f64) {
        (self.origin_x + col * self.pixel_dx, self.origin_y + row * self.pixel_dy)
    }

    /// World coordinates of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        self.world(col as f64 + 0.5, row as f64 + 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterGrid {
    pub width: usize,
    pub height: usize,
    pub geotransform: GeoTransform,
    pub nodata: f64,
}

impl RasterGrid {
    pub fn new(width: usize, height: usize, geotransform: GeoTransform, nodata: f64) -> Result<Self> {
        let grid = Self {
            width,
            height,
            geotransform,
            nodata,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invariant(format!(
                "grid must be non-empty, got {}x{}",
                self.width, self.height
            )));
        }
        if self.width > u32::MAX as usize || self.height > u32::MAX as usize {
            return Err(Error::Invariant("grid dimensions exceed u32".into()));
        }
        let gt = &self.geotransform;
        if !gt.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::Invariant("geotransform must be finite".into()));
        }
        if !(gt.pixel_dx > 0.0) {
            return Err(Error::Invariant(format!("pixel_dx must be > 0, got {}", gt.pixel_dx)));
        }
        if !(gt.pixel_dy < 0.0) {
            return Err(Error::Invariant(format!(
                "pixel_dy must be < 0 (north-up), got {}",
                gt.pixel_dy
            )));
        }
        if gt.row_rot != 0.0 || gt.col_rot != 0.0 {
            return Err(Error::Invariant("rotated geotransforms are not supported".into()));
        }
        if self.nodata.is_nan() {
            return Err(Error::Invariant("NaN is not a legal nodata value".into()));
        }
        if (self.nodata as f32) as f64 != self.nodata {
            return Err(Error::Invariant(format!(
                "nodata {} is not exactly representable as f32",
                self.nodata
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Horizontal pixel size in meters.
    pub fn spacing_x(&self) -> f64 {
        self.geotransform.pixel_dx
    }

    /// Vertical pixel size in meters (positive).
    pub fn spacing_y(&self) -> f64 {
        -self.geotransform.pixel_dy
    }

    pub fn pixel_area(&self) -> f64 {
        self.spacing_x() * self.spacing_y()
    }

    pub fn nodata_f32(&self) -> f32 {
        self.nodata as f32
    }

    /// Grid of a `width` x `height` window starting at pixel `(row, col)`.
    pub fn window(&self, row: usize, col: usize, width: usize, height: usize) -> Result<Self> {
        let (x, y) = self.geotransform.world(col as f64, row as f64);
        let mut gt = self.geotransform;
        gt.origin_x = x;
        gt.origin_y = y;
        RasterGrid::new(width, height, gt, self.nodata)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    grid: RasterGrid,
    bands: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(grid: RasterGrid, bands: usize, data: Vec<f32>) -> Result<Self> {
        let raster = Self { grid, bands, data };
        raster.validate()?;
        Ok(raster)
    }

    /// Single-band raster filled with `value`.
    pub fn filled(grid: RasterGrid, value: f32) -> Self {
        Self {
            grid,
            bands: 1,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: RasterGrid, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(grid.len());
        for r in 0..grid.height {
            for c in 0..grid.width {
                data.push(f(r, c));
            }
        }
        Self::new(grid, 1, data)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.bands == 0 || self.bands > u16::MAX as usize {
            return Err(Error::Invariant(format!("band count {} out of range", self.bands)));
        }
        let expected = self.grid.len() * self.bands;
        if self.data.len() != expected {
            return Err(Error::Invariant(format!(
                "expected {} samples, got {}",
                expected,
                self.data.len()
            )));
        }
        let nodata = self.grid.nodata_f32();
        if let Some(i) = self.data.iter().position(|&v| v != nodata && !v.is_finite()) {
            return Err(Error::Invariant(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }

    pub fn grid(&self) -> &RasterGrid {
        &self.grid
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn nodata(&self) -> f32 {
        self.grid.nodata_f32()
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        v == self.grid.nodata_f32()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.grid.len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.grid.width + col]
    }

    pub fn get_band(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[band * self.grid.len() + row * self.grid.width + col]
    }

    /// Value at `(row, col)` of band 0, or `None` for nodata.
    pub fn value(&self, row: usize, col: usize) -> Option<f32> {
        let v = self.get(row, col);
        (!self.is_nodata(v)).then_some(v)
    }

    /// Single-band raster on the same grid by applying `f` to every valid sample of band 0.
    pub fn map_valid(&self, mut f: impl FnMut(f32) -> f32) -> Result<Raster> {
        let nodata = self.nodata();
        let data = self
            .band(0)
            .iter()
            .map(|&v| if v == nodata { nodata } else { f(v) })
            .collect();
        Raster::new(self.grid, 1, data)
    }

    /// Extracts one band as a single-band raster.
    pub fn extract_band(&self, b: usize) -> Result<Raster> {
        if b >= self.bands {
            return Err(Error::Argument(format!("band {b} out of range ({})", self.bands)));
        }
        Raster::new(self.grid, 1, self.band(b).to_vec())
    }

    /// Stacks single-band rasters on one grid into a multi-band raster.
    pub fn stack(layers: &[&Raster]) -> Result<Raster> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Argument("cannot stack zero rasters".into()))?;
        assert_aligned(layers.iter().copied())?;
        let mut data = Vec::with_capacity(first.grid.len() * layers.len());
        let mut bands = 0;
        for layer in layers {
            data.extend_from_slice(layer.data());
            bands += layer.bands;
        }
        Raster::new(first.grid, bands, data)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut buf = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&0u16.to_le_bytes());
        buf.extend_from_slice(&(self.grid.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.grid.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.bands as u16).to_le_bytes());
        buf.push(DTYPE_F32);
        buf.push(0);
        for v in self.grid.geotransform.to_array() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.grid.nodata.to_le_bytes());
        buf.resize(HEADER_LEN, 0);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Raster> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing AVRS magic".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt(format!(
                "header truncated: {} of {} bytes",
                bytes.len(),
                HEADER_LEN
            )));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());

        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported AVRS version {version}")));
        }
        let flags = u16_at(6);
        if flags != 0 {
            return Err(Error::Format(format!("unsupported flags {flags:#x}")));
        }
        let dtype = bytes[18];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype {dtype}")));
        }
        let width = u32_at(8) as usize;
        let height = u32_at(12) as usize;
        let bands = u16_at(16) as usize;
        let mut gt = [0.0; 6];
        for (i, v) in gt.iter_mut().enumerate() {
            *v = f64_at(20 + 8 * i);
        }
        let nodata = f64_at(68);
        let grid = RasterGrid::new(width, height, GeoTransform::from_array(gt), nodata)?;

        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(bands))
            .ok_or_else(|| Error::Corrupt("sample count overflows".into()))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected * 4 {
            return Err(Error::Corrupt(format!(
                "header declares {}x{}x{} = {} samples, payload holds {} bytes",
                width,
                height,
                bands,
                expected,
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Raster::new(grid, bands, data)
    }
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Raster::decode(&bytes)
}

pub fn write_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = raster.encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Halves resolution by averaging each 2x2 block, ignoring nodata.
pub fn downsample2x_mean(raster: &Raster) -> Result<Raster> {
    if raster.bands() != 1 {
        return Err(Error::Dimension(format!(
            "downsampling expects one band, got {}",
            raster.bands()
        )));
    }
    let (w, h) = (raster.width(), raster.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::Dimension(format!("dimensions must be even, got {w}x{h}")));
    }
    let mut gt = raster.grid().geotransform;
    gt.pixel_dx *= 2.0;
    gt.pixel_dy *= 2.0;
    let grid = RasterGrid::new(w / 2, h / 2, gt, raster.grid().nodata)?;
    let nodata = raster.nodata();
    let mut out = Vec::with_capacity(grid.len());
    for r in 0..h / 2 {
        for c in 0..w / 2 {
            let mut sum = 0.0f64;
            let mut n = 0u32;
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let v = raster.get(2 * r + dr, 2 * c + dc);
                if v != nodata {
                    sum += v as f64;
                    n += 1;
                }
            }
            out.push(if n == 0 { nodata } else { (sum / n as f64) as f32 });
        }
    }
    Raster::new(grid, 1, out)
}

/// Checks that every raster shares exactly the same grid.
pub fn assert_aligned<'a>(rasters: impl IntoIterator<Item = &'a Raster>) -> Result<()> {
    let mut iter = rasters.into_iter();
    let Some(first) = iter.next() else {
        return Ok(());
    };
    let a = first.grid();
    for other in iter {
        let b = other.grid();
        let mismatch = |field: &'static str, x: &dyn std::fmt::Debug, y: &dyn std::fmt::Debug| {
            Err(Error::Alignment {
                field,
                detail: format!("{x:?} vs {y:?}"),
            })
        };
        if a.width != b.width {
            return mismatch("width", &a.width, &b.width);
        }
        if a.height != b.height {
            return mismatch("height", &a.height, &b.height);
        }
        let (ga, gb) = (a.geotransform, b.geotransform);
        let fields = [
            ("origin_x", ga.origin_x, gb.origin_x),
            ("pixel_dx", ga.pixel_dx, gb.pixel_dx),
            ("row_rot", ga.row_rot, gb.row_rot),
            ("origin_y", ga.origin_y, gb.origin_y),
            ("col_rot", ga.col_rot, gb.col_rot),
            ("pixel_dy", ga.pixel_dy, gb.pixel_dy),
            ("nodata", a.nodata, b.nodata),
        ];
        for (name, x, y) in fields {
            if x != y {
                return mismatch(name, &x, &y);
            }
        }
    }
    Ok(())
}

/// Binarizes a probability raster: 1 where `p >= tau`, nodata propagated.
pub fn threshold(prob: &Raster, tau: f32) -> Result<Raster> {
    prob.map_valid(|p| if p >= tau { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize) -> RasterGrid {
        RasterGrid::new(w, h, GeoTransform::north_up(1000.0, 5000.0, 20.0), DEFAULT_NODATA).unwrap()
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = Raster::filled(grid(2, 2), 1.0).encode().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Raster::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_is_corrupt() {
        let mut bytes = Raster::filled(grid(4, 4), 1.0).encode().unwrap();
        bytes.truncate(HEADER_LEN + 10 * 4);
        assert!(matches!(Raster::decode(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn bad_version_is_format_error() {
        let mut bytes = Raster::filled(grid(2, 2), 1.0).encode().unwrap();
        bytes[4] = 7;
        assert!(matches!(Raster::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn single_pixel_file_layout() {
        let bytes = Raster::filled(grid(1, 1), 0.0).encode().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert_eq!(&bytes[HEADER_LEN..], &0.0f32.to_le_bytes());
        assert!(bytes[76..HEADER_LEN].iter().all(|&b| b == 0));
    }

    #[test]
    fn nan_sample_rejected() {
        let err = Raster::new(grid(2, 1), 1, vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn grid_invariants() {
        let gt = GeoTransform::north_up(0.0, 0.0, 20.0);
        assert!(RasterGrid::new(0, 3, gt, -1.0).is_err());
        let mut south_up = gt;
        south_up.pixel_dy = 20.0;
        assert!(RasterGrid::new(3, 3, south_up, -1.0).is_err());
        let mut rotated = gt;
        rotated.row_rot = 0.1;
        assert!(RasterGrid::new(3, 3, rotated, -1.0).is_err());
        assert!(RasterGrid::new(3, 3, gt, f64::NAN).is_err());
        assert!(RasterGrid::new(3, 3, gt, 0.1).is_err());
    }

    #[test]
    fn downsample_blocks() {
        let g = grid(2, 2);
        let r = Raster::new(g, 1, vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        let d = downsample2x_mean(&r).unwrap();
        assert_eq!(d.data(), &[2.0]);
        assert_eq!(d.grid().geotransform.pixel_dx, 40.0);
        assert_eq!(d.grid().geotransform.pixel_dy, -40.0);

        let nd = DEFAULT_NODATA as f32;
        let r = Raster::new(g, 1, vec![5.0, nd, nd, nd]).unwrap();
        assert_eq!(downsample2x_mean(&r).unwrap().data(), &[5.0]);
        let r = Raster::new(g, 1, vec![nd; 4]).unwrap();
        assert_eq!(downsample2x_mean(&r).unwrap().data(), &[nd]);
    }

    #[test]
    fn downsample_odd_dims_rejected() {
        let r = Raster::filled(grid(3, 2), 1.0);
        assert!(matches!(downsample2x_mean(&r), Err(Error::Dimension(_))));
    }

    #[test]
    fn alignment_checks() {
        let a = Raster::filled(grid(3, 3), 0.0);
        let b = Raster::filled(grid(3, 3), 1.0);
        assert_aligned([&a, &b]).unwrap();
        assert_aligned(std::iter::empty::<&Raster>()).unwrap();

        let mut g = grid(3, 3);
        g.geotransform.origin_x += 1e-9;
        let c = Raster::filled(g, 0.0);
        match assert_aligned([&a, &c]) {
            Err(Error::Alignment { field, .. }) => assert_eq!(field, "origin_x"),
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn threshold_convention() {
        let nd = DEFAULT_NODATA as f32;
        let r = Raster::new(grid(4, 1), 1, vec![0.6, 0.5, 0.4, nd]).unwrap();
        assert_eq!(threshold(&r, 0.5).unwrap().data(), &[1.0, 1.0, 0.0, nd]);
        let t = threshold(&r, 1.0 + f32::EPSILON).unwrap();
        assert_eq!(&t.data()[..3], &[0.0, 0.0, 0.0]);
    }
}
