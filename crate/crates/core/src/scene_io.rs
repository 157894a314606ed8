//! On-disk layout of scene and feature directories.
//!
//! A scene directory holds `vv_ref.avrs`, `vv_act.avrs`, `vh_ref.avrs`, `vh_act.avrs`,
//! `dem.avrs`, an optional `labels.avrs` and a `scene.json` manifest. A feature
//! directory holds `d_vv.avrs`, `d_vh.avrs`, `vvvh.avrs`, `slope.avrs` and `par.avrs`
//! (angles in degrees).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureStack;
use crate::error::{Error, Result};
use crate::radiometry::{FeatureTriplet, SceneStack};
use crate::raster::{read_raster, write_raster, Raster};
use crate::terrain::normalize_angle;

pub const SCENE_MANIFEST: &str = "scene.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackscatterUnits {
    /// Linear power (sigma nought).
    Linear,
    Db,
    /// Already clipped and rescaled to `[0, 1]`.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub id: String,
    pub units: BackscatterUnits,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub n_avalanches: Option<usize>,
    pub has_labels: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn write_scene_dir(dir: impl AsRef<Path>, scene: &SceneStack, manifest: &SceneManifest) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_raster(&scene.vv_ref, dir.join("vv_ref.avrs"))?;
    write_raster(&scene.vv_act, dir.join("vv_act.avrs"))?;
    write_raster(&scene.vh_ref, dir.join("vh_ref.avrs"))?;
    write_raster(&scene.vh_act, dir.join("vh_act.avrs"))?;
    write_raster(&scene.dem, dir.join("dem.avrs"))?;
    if let Some(labels) = &scene.labels {
        write_raster(labels, dir.join("labels.avrs"))?;
    }
    let mut m = manifest.clone();
    m.has_labels = scene.labels.is_some();
    let path = dir.join(SCENE_MANIFEST);
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_scene_dir(dir: impl AsRef<Path>) -> Result<(SceneStack, SceneManifest)> {
    let dir = dir.as_ref();
    let path = dir.join(SCENE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: SceneManifest = serde_json::from_str(&text)?;
    let labels = if manifest.has_labels {
        Some(read_raster(dir.join("labels.avrs"))?)
    } else {
        None
    };
    let scene = SceneStack::new(
        read_raster(dir.join("vv_ref.avrs"))?,
        read_raster(dir.join("vv_act.avrs"))?,
        read_raster(dir.join("vh_ref.avrs"))?,
        read_raster(dir.join("vh_act.avrs"))?,
        read_raster(dir.join("dem.avrs"))?,
        labels,
    )?;
    Ok((scene, manifest))
}

pub fn write_feature_triplet(dir: impl AsRef<Path>, f: &FeatureTriplet) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_raster(&f.d_vv, dir.join("d_vv.avrs"))?;
    write_raster(&f.d_vh, dir.join("d_vh.avrs"))?;
    write_raster(&f.vvvh, dir.join("vvvh.avrs"))
}

/// Loads a feature directory, normalizing slope and PAR angles to `[0, 1)`.
pub fn read_feature_dir(dir: impl AsRef<Path>, labels: Option<Raster>) -> Result<FeatureStack> {
    let dir = dir.as_ref();
    FeatureStack::new(
        read_raster(dir.join("d_vv.avrs"))?,
        read_raster(dir.join("d_vh.avrs"))?,
        read_raster(dir.join("vvvh.avrs"))?,
        normalize_angle(&read_raster(dir.join("slope.avrs"))?)?,
        normalize_angle(&read_raster(dir.join("par.avrs"))?)?,
        labels,
    )
}
