//! Scene-to-features chain shared by the command line and the tests.

use crate::dataset::FeatureStack;
use crate::error::{Error, Result};
use crate::radiometry::{change_features, rescale_unit, unit_scale_scene, SceneStack, DB_MAX, DB_MIN};
use crate::raster::Raster;
use crate::scene_io::BackscatterUnits;
use crate::terrain::{normalize_angle, par_field, release_mask, slope_deg, ParField, ReleaseMask, SlopeField};

#[derive(Debug, Clone)]
pub struct TerrainLayers {
    pub slope: SlopeField,
    pub release: ReleaseMask,
    pub par: ParField,
}

/// Slope, release mask and PAR (degrees) for a DEM on a square-pixel grid.
pub fn terrain_layers(dem: &Raster, par_radius_m: f64, release_band: (f64, f64)) -> Result<TerrainLayers> {
    let g = dem.grid();
    if (g.spacing_x() - g.spacing_y()).abs() > 1e-9 * g.spacing_x() {
        return Err(Error::Argument(format!(
            "terrain needs square pixels, got {} x {} m",
            g.spacing_x(),
            g.spacing_y()
        )));
    }
    let slope = slope_deg(dem, g.spacing_x())?;
    let release = release_mask(&slope, release_band)?;
    let par = par_field(dem, &release, par_radius_m)?;
    Ok(TerrainLayers { slope, release, par })
}

/// Brings the four backscatter channels to clipped, unit-scaled dB.
pub fn unit_scene(scene: &SceneStack, units: BackscatterUnits) -> Result<SceneStack> {
    match units {
        BackscatterUnits::Linear => unit_scale_scene(scene),
        BackscatterUnits::Db => scene.map_channels(|r| {
            let clipped = r.map_valid(|v| (v as f64).clamp(DB_MIN, DB_MAX) as f32)?;
            rescale_unit(&clipped, DB_MIN, DB_MAX)
        }),
        BackscatterUnits::Unit => {
            scene.validate()?;
            Ok(scene.clone())
        }
    }
}

/// Full feature stack for a scene: change features plus normalized slope and PAR.
/// Labels are carried over from the scene.
pub fn scene_features(
    scene: &SceneStack,
    units: BackscatterUnits,
    par_radius_m: f64,
    release_band: (f64, f64),
) -> Result<(FeatureStack, TerrainLayers)> {
    let unit = unit_scene(scene, units)?;
    let triplet = change_features(&unit)?;
    let terrain = terrain_layers(&scene.dem, par_radius_m, release_band)?;
    let stack = FeatureStack::new(
        triplet.d_vv,
        triplet.d_vh,
        triplet.vvvh,
        normalize_angle(terrain.slope.raster())?,
        normalize_angle(&terrain.par.raster)?,
        scene.labels.clone(),
    )?;
    Ok((stack, terrain))
}
