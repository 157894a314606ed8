use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use ava_core::dataset::{class_stats, extract_patches, split_scenes, store_patches, DatasetManifest, PatchConfig};
use ava_core::dihedral::Dihedral;
use ava_core::metrics::{evaluate, EvalConfig, EvalScene};
use ava_core::pipeline::{scene_features, terrain_layers, unit_scene};
use ava_core::radiometry::{change_features, rgb_composite, write_gray_png};
use ava_core::raster::{read_raster, write_raster, Raster};
use ava_core::scene_io::{
    read_feature_dir, read_scene_dir, write_feature_triplet, write_scene_dir, BackscatterUnits, SceneManifest,
};
use ava_core::segments::{
    connected_components, filter_segments, segment_stats, segments_to_geojson, segments_to_mask, Connectivity,
    FilterCriteria, MatchRule,
};
use ava_core::synth::{synth_dem, synth_scene};
use ava_model::{predict_scene, threshold, train, Blend, InferenceConfig, Model, ModelError, PipelineConfig};

use crate::{
    BlendArg, Cli, Command, DatasetBuildArgs, DatasetCommand, DatasetSplitArgs, DatasetStatsArgs, EvaluateArgs,
    FeaturesArgs, PredictArgs, SegmentsArgs, SynthArgs, TerrainArgs, TerrainOpts, TrainArgs,
};

/// A problem with the invocation rather than the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 1 for usage and configuration errors, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        match cause.downcast_ref::<ModelError>() {
            Some(ModelError::Config(_)) | Some(ModelError::Core(ava_core::Error::Argument(_))) => return 1,
            _ => {}
        }
        if let Some(ava_core::Error::Argument(_)) = cause.downcast_ref::<ava_core::Error>() {
            return 1;
        }
    }
    2
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Features(a) => features(a),
        Command::Terrain(a) => terrain(a),
        Command::Dataset(DatasetCommand::Build(a)) => dataset_build(cli, a),
        Command::Dataset(DatasetCommand::Split(a)) => dataset_split(cli, a),
        Command::Dataset(DatasetCommand::Stats(a)) => dataset_stats(a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Predict(a) => predict(a),
        Command::Segments(a) => segments(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn band(t: &TerrainOpts) -> (f64, f64) {
    (t.band_min, t.band_max)
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let dem = synth_dem(seed, a.size, a.relief)?;
    let s = synth_scene(seed, &dem, a.avalanches)?;
    let manifest = SceneManifest {
        id: a.id.clone().unwrap_or_else(|| format!("synth-{seed}")),
        units: BackscatterUnits::Linear,
        seed: Some(seed),
        n_avalanches: Some(a.avalanches),
        has_labels: true,
    };
    write_scene_dir(&a.out, &s.scene, &manifest)?;
    log::info!(
        "wrote scene {} with {} avalanches to {}",
        manifest.id,
        s.avalanches.len(),
        a.out.display()
    );
    Ok(())
}

fn features(a: &FeaturesArgs) -> Result<()> {
    let (scene, manifest) = read_scene_dir(&a.scene)?;
    let unit = unit_scene(&scene, manifest.units)?;
    let f = change_features(&unit)?;
    write_feature_triplet(&a.out, &f)?;
    if a.png {
        rgb_composite(&unit.vv_ref, &unit.vv_act, a.out.join("composite.png"))?;
    }
    log::info!("wrote change features of {} to {}", manifest.id, a.out.display());
    Ok(())
}

fn terrain(a: &TerrainArgs) -> Result<()> {
    let dem = read_raster(&a.dem)?;
    let t = terrain_layers(&dem, a.terrain.radius, band(&a.terrain))?;
    create_dir(&a.out)?;
    write_raster(t.slope.raster(), a.out.join("slope.avrs"))?;
    write_raster(t.release.raster(), a.out.join("release.avrs"))?;
    write_raster(&t.par.raster, a.out.join("par.avrs"))?;
    log::info!("wrote slope, release and PAR to {}", a.out.display());
    Ok(())
}

fn dataset_build(cli: &Cli, a: &DatasetBuildArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let cfg = PatchConfig {
        size: a.patch_size,
        stride: a.stride.unwrap_or(a.patch_size),
        neg_keep_rate: a.neg_keep,
        seed,
        ..PatchConfig::default()
    };
    create_dir(&a.out)?;
    let mut manifest = DatasetManifest::new(seed, a.patch_size);
    let mut seen = std::collections::BTreeSet::new();
    for dir in &a.scenes {
        let (scene, sm) = read_scene_dir(dir)?;
        if !seen.insert(sm.id.clone()) {
            bail!(usage(format!("scene id {} appears twice", sm.id)));
        }
        let (stack, _) = scene_features(&scene, sm.units, a.terrain.radius, band(&a.terrain))?;
        let patches = extract_patches(&sm.id, &stack, &cfg)?;
        log::info!("{}: {} patches", sm.id, patches.len());
        store_patches(&mut manifest, &a.out, stack.grid(), &patches)?;
    }
    if let Some(f) = a.val_fraction {
        manifest = split_scenes(&manifest, f, seed)?;
    }
    let path = a.out.join("manifest.json");
    manifest.save(&path)?;
    log::info!(
        "wrote {} patches ({} positive / {} negative pixels) to {}",
        manifest.records.len(),
        manifest.class_totals.positive,
        manifest.class_totals.negative,
        path.display()
    );
    Ok(())
}

fn dataset_split(cli: &Cli, a: &DatasetSplitArgs) -> Result<()> {
    let m = DatasetManifest::load(&a.manifest)?;
    let split = split_scenes(&m, a.val_fraction, cli.seed.unwrap_or(0))?;
    let out = a.out.as_ref().unwrap_or(&a.manifest);
    split.save(out)?;
    log::info!("split {} scenes into {}", split.splits.len(), out.display());
    Ok(())
}

fn dataset_stats(a: &DatasetStatsArgs) -> Result<()> {
    let m = DatasetManifest::load(&a.manifest)?;
    let stats = class_stats(&m, a.cap)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    cfg.train.validate()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    if manifest.splits.is_empty() {
        bail!(usage("manifest has no split; run `ava dataset split` first"));
    }
    let base = a.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let model = Model::build(cfg.model, cfg.train.seed)?;
    log::info!("training a model with {} parameters", model.parameter_count());
    let out = train(model, &manifest, &base, &cfg.train)?;
    create_dir(&a.out)?;
    out.best_model.save(a.out.join("model.weights"))?;
    out.final_model.save(a.out.join("final.weights"))?;
    out.history.write_csv(a.out.join("history.csv"))?;
    let summary = serde_json::json!({
        "best_epoch": out.best_epoch,
        "epochs_run": out.history.epochs.len(),
        "pos_weight": out.pos_weight,
        "stopped_early": out.stopped_early,
        "config": cfg,
    });
    write_text(
        &a.out.join("train_summary.json"),
        &format!("{}\n", serde_json::to_string_pretty(&summary)?),
    )?;
    log::info!(
        "best epoch {}; wrote weights and history to {}",
        out.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn parse_tta(s: &str) -> Result<Vec<Dihedral>> {
    if s == "all" {
        return Ok(Dihedral::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in s.split(',').map(str::trim) {
        let d = Dihedral::parse(name).map_err(|e| usage(e.to_string()))?;
        if !out.contains(&d) {
            out.push(d);
        }
    }
    Ok(out)
}

fn predict(a: &PredictArgs) -> Result<()> {
    let model = Model::load(&a.weights).with_context(|| format!("loading {}", a.weights.display()))?;
    let stack = match (&a.scene, &a.features) {
        (Some(dir), None) => {
            let (scene, sm) = read_scene_dir(dir)?;
            scene_features(&scene, sm.units, a.terrain.radius, band(&a.terrain))?.0
        }
        (None, Some(dir)) => read_feature_dir(dir, None)?,
        _ => bail!(usage("give exactly one of --scene and --features")),
    };
    let cfg = InferenceConfig {
        window: a.window,
        stride: a.stride,
        tta: parse_tta(&a.tta)?,
        blend: match a.blend {
            BlendArg::Hann => Blend::Hann,
            BlendArg::Uniform => Blend::Uniform,
        },
        batch_size: a.batch_size,
    };
    if !(0.0..=1.0).contains(&a.threshold) {
        bail!(usage(format!("threshold {} outside [0, 1]", a.threshold)));
    }
    let prob = predict_scene(&model, &stack, &cfg)?;
    let mask = threshold(&prob, a.threshold)?;
    create_dir(&a.out)?;
    write_raster(&prob, a.out.join("prob.avrs"))?;
    write_raster(&mask, a.out.join("mask.avrs"))?;
    if a.png {
        write_gray_png(&prob, a.out.join("prob.png"))?;
        write_gray_png(&mask, a.out.join("mask.png"))?;
    }
    let positive = mask.data().iter().filter(|&&v| v == 1.0).count();
    log::info!("wrote prediction to {} ({positive} debris pixels)", a.out.display());
    Ok(())
}

fn read_optional(path: &Option<PathBuf>, like: &Raster) -> Result<Raster> {
    match path {
        Some(p) => Ok(read_raster(p)?),
        None => Ok(Raster::filled(*like.grid(), like.nodata())),
    }
}

fn segments(a: &SegmentsArgs) -> Result<()> {
    let conn = Connectivity::from_count(a.connectivity)?;
    let mask = read_raster(&a.mask)?;
    let mut segs = connected_components(&mask, conn)?;
    let dem = read_optional(&a.dem, &mask)?;
    let par = read_optional(&a.par, &mask)?;
    let d_vv = read_optional(&a.d_vv, &mask)?;
    if a.dem.is_some() || a.par.is_some() || a.d_vv.is_some() {
        for s in &mut segs {
            segment_stats(s, &dem, &par, &d_vv)?;
        }
    }
    let elevation_range = match (a.elev_min, a.elev_max) {
        (Some(lo), Some(hi)) => {
            if a.dem.is_none() {
                bail!(usage("--elev-min/--elev-max need --dem"));
            }
            Some((lo, hi))
        }
        _ => None,
    };
    let criteria = FilterCriteria {
        min_area_m2: a.min_area,
        elevation_range,
        excluded_zones: a.exclude.as_ref().map(read_raster).transpose()?,
        runout_mask: a.runout.as_ref().map(read_raster).transpose()?,
        min_runout_overlap: a.min_runout_overlap,
    };
    let (kept, rejected) = filter_segments(segs, &criteria)?;
    let geo = segments_to_geojson(
        &kept,
        a.include_rejected.then_some(rejected.as_slice()),
        mask.grid(),
        conn,
    );
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_text(&a.out, &format!("{}\n", serde_json::to_string_pretty(&geo)?))?;
    if let Some(p) = &a.mask_out {
        write_raster(&segments_to_mask(&kept, mask.grid())?, p)?;
    }
    log::info!(
        "kept {} segments, rejected {}; wrote {}",
        kept.len(),
        rejected.len(),
        a.out.display()
    );
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    if a.preds.len() != a.gts.len() {
        bail!(usage(format!("{} --pred but {} --gt", a.preds.len(), a.gts.len())));
    }
    if !a.ids.is_empty() && a.ids.len() != a.preds.len() {
        bail!(usage(format!("{} --id for {} scenes", a.ids.len(), a.preds.len())));
    }
    let mut scenes = Vec::with_capacity(a.preds.len());
    for (k, (p, g)) in a.preds.iter().zip(&a.gts).enumerate() {
        let id = match a.ids.get(k) {
            Some(id) => id.clone(),
            None => p
                .parent()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("scene{k}")),
        };
        scenes.push(EvalScene {
            id,
            prob: read_raster(p)?,
            gt: read_raster(g)?,
        });
    }
    let cfg = EvalConfig {
        threshold: a.threshold,
        sweep: if a.sweep {
            EvalConfig::decile_sweep()
        } else {
            Vec::new()
        },
        connectivity: Connectivity::from_count(a.connectivity)?,
        match_rule: MatchRule {
            min_overlap_px: a.min_overlap,
            min_iou: a.min_iou,
        },
        min_pred_area_m2: a.min_area,
    };
    let report = evaluate(&scenes, &cfg)?;
    let json = report.to_json()?;
    match &a.out {
        Some(p) => write_text(p, &json)?,
        None => print!("{json}"),
    }
    let agg = &report.aggregate;
    log::info!(
        "F1 {:.4} IoU {:.4}; events detected {} missed {} false {}",
        agg.pixels.f1,
        agg.pixels.iou,
        agg.events.detected,
        agg.events.missed,
        agg.events.false_pos
    );
    Ok(())
}
