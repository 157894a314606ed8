//! Training patches, augmentation, class statistics and scene-level splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dihedral::Dihedral;
use crate::error::{Error, Result};
use crate::raster::{assert_aligned, read_raster, write_raster, Raster, RasterGrid};

pub const FEATURE_NAMES: [&str; 5] = ["d_vv", "d_vh", "vvvh", "slope_n", "par_n"];
pub const N_FEATURES: usize = 5;
pub const DEFAULT_PATCH_SIZE: usize = 160;
pub const DEFAULT_POS_WEIGHT_CAP: f64 = 500.0;
pub const DEFAULT_NEG_KEEP_RATE: f64 = 0.1;
pub const MANIFEST_VERSION: u32 = 1;

/// The five unit-range model inputs for one scene, plus optional labels.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub d_vv: Raster,
    pub d_vh: Raster,
    pub vvvh: Raster,
    pub slope_n: Raster,
    pub par_n: Raster,
    pub labels: Option<Raster>,
}

impl FeatureStack {
    pub fn new(
        d_vv: Raster,
        d_vh: Raster,
        vvvh: Raster,
        slope_n: Raster,
        par_n: Raster,
        labels: Option<Raster>,
    ) -> Result<Self> {
        let stack = Self {
            d_vv,
            d_vh,
            vvvh,
            slope_n,
            par_n,
            labels,
        };
        let mut all: Vec<&Raster> = stack.channels().to_vec();
        if let Some(l) = &stack.labels {
            all.push(l);
        }
        assert_aligned(all.iter().copied())?;
        for (name, r) in FEATURE_NAMES.iter().zip(stack.channels()) {
            if r.bands() != 1 {
                return Err(Error::Dimension(format!("feature {name} must be single-band")));
            }
            if let Some(i) = r
                .data()
                .iter()
                .position(|&v| !r.is_nodata(v) && !(0.0..=1.0).contains(&v))
            {
                return Err(Error::Value {
                    index: i,
                    detail: format!("feature {name} value {} outside [0, 1]", r.data()[i]),
                });
            }
        }
        Ok(stack)
    }

    pub fn channels(&self) -> [&Raster; N_FEATURES] {
        [&self.d_vv, &self.d_vh, &self.vvvh, &self.slope_n, &self.par_n]
    }

    pub fn grid(&self) -> &RasterGrid {
        self.d_vv.grid()
    }

    /// Channel-major samples with nodata replaced by 0, and a per-pixel validity mask
    /// (valid iff every channel has data).
    pub fn dense(&self) -> (Vec<f32>, Vec<bool>) {
        let n = self.grid().len();
        let mut data = Vec::with_capacity(N_FEATURES * n);
        let mut valid = vec![true; n];
        for r in self.channels() {
            for (i, &v) in r.band(0).iter().enumerate() {
                if r.is_nodata(v) {
                    valid[i] = false;
                    data.push(0.0);
                } else {
                    data.push(v);
                }
            }
        }
        (data, valid)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub scene_id: String,
    pub row: usize,
    pub col: usize,
}

/// A square training sample: 5 feature planes, a binary label plane and validity.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    /// `N_FEATURES` planes of `size * size`, channel-major.
    pub features: Vec<f32>,
    pub label: Vec<f32>,
    pub valid: Vec<bool>,
    pub origin: PatchOrigin,
}

impl Patch {
    pub fn positive_pixels(&self) -> u64 {
        self.label
            .iter()
            .zip(&self.valid)
            .filter(|(&l, &v)| v && l == 1.0)
            .count() as u64
    }

    pub fn valid_pixels(&self) -> u64 {
        self.valid.iter().filter(|&&v| v).count() as u64
    }

    pub fn invalid_pixels(&self) -> u64 {
        self.valid.len() as u64 - self.valid_pixels()
    }

    pub fn feature_plane(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.features[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchConfig {
    pub size: usize,
    pub stride: usize,
    /// Patches with a smaller avalanche fraction count as negative.
    pub min_pos_fraction: f64,
    /// Probability of keeping a negative patch.
    pub neg_keep_rate: f64,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            size: DEFAULT_PATCH_SIZE,
            stride: DEFAULT_PATCH_SIZE,
            min_pos_fraction: 1e-9,
            neg_keep_rate: DEFAULT_NEG_KEEP_RATE,
            seed: 0,
        }
    }
}

/// Cuts grid-aligned patches from a labeled scene, subsampling negative patches.
pub fn extract_patches(scene_id: &str, stack: &FeatureStack, cfg: &PatchConfig) -> Result<Vec<Patch>> {
    let labels = stack
        .labels
        .as_ref()
        .ok_or_else(|| Error::Argument(format!("scene {scene_id} has no labels")))?;
    if cfg.stride == 0 {
        return Err(Error::Argument("stride must be >= 1".into()));
    }
    if cfg.size == 0 {
        return Err(Error::Argument("patch size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.neg_keep_rate) {
        return Err(Error::Argument("neg_keep_rate must lie in [0, 1]".into()));
    }
    let grid = *stack.grid();
    let (w, h, s) = (grid.width, grid.height, cfg.size);
    if s > w || s > h {
        return Err(Error::Dimension(format!("scene {w}x{h} smaller than patch size {s}")));
    }
    let (dense, valid) = stack.dense();
    let n = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for row in (0..=h - s).step_by(cfg.stride) {
        for col in (0..=w - s).step_by(cfg.stride) {
            let mut features = Vec::with_capacity(N_FEATURES * s * s);
            for ch in 0..N_FEATURES {
                for r in row..row + s {
                    let start = ch * n + r * w + col;
                    features.extend_from_slice(&dense[start..start + s]);
                }
            }
            let mut label = Vec::with_capacity(s * s);
            let mut pvalid = Vec::with_capacity(s * s);
            for r in row..row + s {
                for c in col..col + s {
                    let l = labels.get(r, c);
                    let ok = valid[r * w + c] && !labels.is_nodata(l);
                    pvalid.push(ok);
                    label.push(if ok && l == 1.0 { 1.0 } else { 0.0 });
                }
            }
            let patch = Patch {
                size: s,
                features,
                label,
                valid: pvalid,
                origin: PatchOrigin {
                    scene_id: scene_id.to_string(),
                    row,
                    col,
                },
            };
            let frac = patch.positive_pixels() as f64 / (s * s) as f64;
            // Always draw so the keep decisions don't depend on which patches are positive.
            let draw: f64 = rng.gen();
            if frac >= cfg.min_pos_fraction || draw < cfg.neg_keep_rate {
                out.push(patch);
            }
        }
    }
    Ok(out)
}

/// Augmentation applied identically to features, label and validity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Dihedral(Dihedral),
    Shift,
    Zoom,
    Shear,
}

/// Parameter ranges for the affine augmentations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineRanges {
    pub max_shift_px: f64,
    pub zoom: (f64, f64),
    pub max_shear_deg: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            max_shift_px: 16.0,
            zoom: (0.9, 1.1),
            max_shear_deg: 5.0,
        }
    }
}

impl Augmentation {
    /// Parses `hflip`, `vflip`, `rot90`, `rot180`, `rot270`, `transpose`,
    /// `antitranspose`, `identity`, `shift`, `zoom` or `shear`.
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "shift" => Ok(Augmentation::Shift),
            "zoom" => Ok(Augmentation::Zoom),
            "shear" => Ok(Augmentation::Shear),
            other => Dihedral::parse(other)
                .map(Augmentation::Dihedral)
                .map_err(|_| Error::Argument(format!("unknown transform `{other}`"))),
        }
    }
}

pub fn augment(patch: &Patch, aug: Augmentation, seed: u64) -> Patch {
    augment_with(patch, aug, seed, &AffineRanges::default())
}

pub fn augment_with(patch: &Patch, aug: Augmentation, seed: u64, ranges: &AffineRanges) -> Patch {
    let s = patch.size;
    match aug {
        Augmentation::Dihedral(d) => Patch {
            size: s,
            features: d.apply_planes(&patch.features, N_FEATURES, s, s),
            label: d.apply(&patch.label, s, s),
            valid: d.apply(&patch.valid, s, s),
            origin: patch.origin.clone(),
        },
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Maps output offsets from the patch center to source offsets.
            let (m, t) = match aug {
                Augmentation::Shift => {
                    let dx = rng.gen_range(-ranges.max_shift_px..=ranges.max_shift_px);
                    let dy = rng.gen_range(-ranges.max_shift_px..=ranges.max_shift_px);
                    ([[1.0, 0.0], [0.0, 1.0]], [-dy, -dx])
                }
                Augmentation::Zoom => {
                    let z = rng.gen_range(ranges.zoom.0..=ranges.zoom.1);
                    ([[1.0 / z, 0.0], [0.0, 1.0 / z]], [0.0, 0.0])
                }
                Augmentation::Shear => {
                    let k = rng
                        .gen_range(-ranges.max_shear_deg..=ranges.max_shear_deg)
                        .to_radians()
                        .tan();
                    ([[1.0, 0.0], [-k, 1.0]], [0.0, 0.0])
                }
                Augmentation::Dihedral(_) => unreachable!(),
            };
            resample_affine(patch, m, t)
        }
    }
}

/// Inverse-maps each output pixel (row, col) to a source position; features are
/// bilinear, labels and validity nearest-neighbour, out-of-frame pixels zero and invalid.
fn resample_affine(patch: &Patch, m: [[f64; 2]; 2], t: [f64; 2]) -> Patch {
    let s = patch.size;
    let n = s * s;
    let center = (s as f64 - 1.0) / 2.0;
    let mut features = vec![0.0f32; N_FEATURES * n];
    let mut label = vec![0.0f32; n];
    let mut valid = vec![false; n];
    for r in 0..s {
        for c in 0..s {
            let (dy, dx) = (r as f64 - center, c as f64 - center);
            let sy = m[0][0] * dy + m[0][1] * dx + center + t[0];
            let sx = m[1][0] * dy + m[1][1] * dx + center + t[1];
            if sy < 0.0 || sx < 0.0 || sy > (s - 1) as f64 || sx > (s - 1) as f64 {
                continue;
            }
            let i = r * s + c;
            let (nr, nc) = (sy.round() as usize, sx.round() as usize);
            let ni = nr * s + nc;
            if !patch.valid[ni] {
                continue;
            }
            valid[i] = true;
            label[i] = patch.label[ni];
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(s - 1), (x0 + 1).min(s - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..N_FEATURES {
                let plane = patch.feature_plane(ch);
                let v = (plane[y0 * s + x0] as f64 * (1.0 - fx) + plane[y0 * s + x1] as f64 * fx) * (1.0 - fy)
                    + (plane[y1 * s + x0] as f64 * (1.0 - fx) + plane[y1 * s + x1] as f64 * fx) * fy;
                features[ch * n + i] = v as f32;
            }
        }
    }
    Patch {
        size: s,
        features,
        label,
        valid,
        origin: patch.origin.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub origin: PatchOrigin,
    pub positive_pixels: u64,
    pub valid_pixels: u64,
    /// Present when the patch has invalid pixels.
    pub validity_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTotals {
    pub positive: u64,
    pub negative: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub patch_size: usize,
    pub records: Vec<PatchRecord>,
    pub splits: BTreeMap<String, Split>,
    pub class_totals: ClassTotals,
}

impl DatasetManifest {
    pub fn new(seed: u64, patch_size: usize) -> Self {
        Self {
            version: MANIFEST_VERSION,
            seed,
            patch_size,
            records: Vec::new(),
            splits: BTreeMap::new(),
            class_totals: ClassTotals::default(),
        }
    }

    pub fn scene_ids(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.origin.scene_id.clone()).collect()
    }

    /// Totals recomputed from the records.
    pub fn recount(&self) -> ClassTotals {
        self.records.iter().fold(ClassTotals::default(), |acc, r| ClassTotals {
            positive: acc.positive + r.positive_pixels,
            negative: acc.negative + (r.valid_pixels - r.positive_pixels),
        })
    }

    pub fn split_of(&self, scene_id: &str) -> Option<Split> {
        self.splits.get(scene_id).copied()
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &PatchRecord> {
        self.records
            .iter()
            .filter(move |r| self.split_of(&r.origin.scene_id) == Some(split))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Writes patches under `dir` as 6-band AVRS files and appends their records.
pub fn store_patches(
    manifest: &mut DatasetManifest,
    dir: impl AsRef<Path>,
    scene_grid: &RasterGrid,
    patches: &[Patch],
) -> Result<()> {
    let dir = dir.as_ref();
    for p in patches {
        let name = format!("{}_r{}_c{}", p.origin.scene_id, p.origin.row, p.origin.col);
        let path = PathBuf::from(format!("{name}.avrs"));
        let grid = scene_grid.window(p.origin.row, p.origin.col, p.size, p.size)?;
        let mut data = p.features.clone();
        data.extend_from_slice(&p.label);
        write_raster(&Raster::new(grid, N_FEATURES + 1, data)?, dir.join(&path))?;
        let validity_path = if p.invalid_pixels() > 0 {
            let vp = PathBuf::from(format!("{name}.valid.avrs"));
            let v = p.valid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            write_raster(&Raster::new(grid, 1, v)?, dir.join(&vp))?;
            Some(vp)
        } else {
            None
        };
        manifest.records.push(PatchRecord {
            path,
            origin: p.origin.clone(),
            positive_pixels: p.positive_pixels(),
            valid_pixels: p.valid_pixels(),
            validity_path,
        });
    }
    manifest.class_totals = manifest.recount();
    Ok(())
}

pub fn load_patch(base: impl AsRef<Path>, record: &PatchRecord) -> Result<Patch> {
    let base = base.as_ref();
    let r = read_raster(base.join(&record.path))?;
    if r.bands() != N_FEATURES + 1 || r.width() != r.height() {
        return Err(Error::Format(format!(
            "{} is not a square {}-band patch",
            record.path.display(),
            N_FEATURES + 1
        )));
    }
    let s = r.width();
    let n = s * s;
    let valid = match &record.validity_path {
        Some(vp) => read_raster(base.join(vp))?.data().iter().map(|&v| v == 1.0).collect(),
        None => vec![true; n],
    };
    let data = r.into_data();
    Ok(Patch {
        size: s,
        features: data[..N_FEATURES * n].to_vec(),
        label: data[N_FEATURES * n..].to_vec(),
        valid,
        origin: record.origin.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub pos_pixels: u64,
    pub neg_pixels: u64,
    pub pos_weight: f64,
}

/// Positive-class weight `neg / pos`, capped at `cap`.
pub fn class_stats_from_totals(totals: ClassTotals, cap: f64) -> Result<ClassStats> {
    if totals.positive == 0 {
        return Err(Error::DegenerateDataset("no positive pixels".into()));
    }
    let ratio = totals.negative as f64 / totals.positive as f64;
    Ok(ClassStats {
        pos_pixels: totals.positive,
        neg_pixels: totals.negative,
        pos_weight: ratio.min(cap),
    })
}

pub fn class_stats(manifest: &DatasetManifest, cap: f64) -> Result<ClassStats> {
    if manifest.records.is_empty() {
        return Err(Error::DegenerateDataset("manifest has no patches".into()));
    }
    class_stats_from_totals(manifest.class_totals, cap)
}

/// Assigns whole scenes to train/validation, deterministically under `seed`.
pub fn split_scenes(manifest: &DatasetManifest, val_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::Argument(format!("val_fraction {val_fraction} outside [0, 1]")));
    }
    let mut scenes: Vec<String> = manifest.scene_ids().into_iter().collect();
    if scenes.len() < 2 {
        return Err(Error::DegenerateDataset(format!(
            "need at least 2 scenes to split, found {}",
            scenes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scenes.shuffle(&mut rng);
    let n_val = ((scenes.len() as f64 * val_fraction).round() as usize).clamp(1, scenes.len() - 1);
    let mut out = manifest.clone();
    out.splits = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), if i < n_val { Split::Val } else { Split::Train }))
        .collect();
    Ok(out)
}
