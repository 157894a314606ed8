//! Pixel- and event-level evaluation.
//!
//! Pixel metrics are micro-averaged over all valid pixels of a scene (and over all
//! scenes for the aggregate). Ratios with a zero denominator are reported as 0 and
//! flagged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{assert_aligned, threshold, Raster, RasterGrid};
use crate::segments::{
    connected_components, filter_segments, match_events, Connectivity, EventCounts, FilterCriteria, MatchRule,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Names of metrics whose denominator was zero.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub undefined: Vec<String>,
}

impl PixelMetrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let mut undefined = Vec::new();
        let mut ratio = |name: &str, num: u64, den: u64| {
            if den == 0 {
                undefined.push(name.to_string());
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio("precision", tp, tp + fp);
        let recall = ratio("recall", tp, tp + fn_);
        let iou = ratio("iou", tp, tp + fp + fn_);
        let f1 = if precision + recall == 0.0 {
            undefined.push("f1".into());
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            iou,
            undefined,
        }
    }

    pub fn is_flagged(&self, name: &str) -> bool {
        self.undefined.iter().any(|u| u == name)
    }
}

fn confusion(pred: &Raster, gt: &Raster) -> Result<(u64, u64, u64)> {
    assert_aligned([pred, gt])?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.band(0).iter().zip(gt.band(0)) {
        if pred.is_nodata(p) || gt.is_nodata(g) {
            continue;
        }
        match (p == 1.0, g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fn_))
}

/// Precision, recall, F1 and IoU of a binary prediction against a binary ground truth.
pub fn pixel_metrics(pred: &Raster, gt: &Raster) -> Result<PixelMetrics> {
    let (tp, fp, fn_) = confusion(pred, gt)?;
    Ok(PixelMetrics::from_counts(tp, fp, fn_))
}

#[derive(Debug, Clone)]
pub struct EvalScene {
    pub id: String,
    /// Probabilities in `[0, 1]`; binary masks are valid inputs.
    pub prob: Raster,
    pub gt: Raster,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub threshold: f32,
    pub sweep: Vec<f32>,
    pub connectivity: Connectivity,
    pub match_rule: MatchRule,
    /// Predicted segments smaller than this are dropped before event matching.
    pub min_pred_area_m2: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            sweep: Vec::new(),
            connectivity: Connectivity::Eight,
            match_rule: MatchRule::default(),
            min_pred_area_m2: None,
        }
    }
}

impl EvalConfig {
    /// Thresholds 0.1, 0.2, ..., 0.9.
    pub fn decile_sweep() -> Vec<f32> {
        (1..=9).map(|k| k as f32 / 10.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub detected: usize,
    pub missed: usize,
    pub false_pos: usize,
    pub recall: f64,
    pub precision: f64,
}

impl From<EventCounts> for EventSummary {
    fn from(c: EventCounts) -> Self {
        Self {
            detected: c.detected,
            missed: c.missed,
            false_pos: c.false_pos,
            recall: c.recall(),
            precision: c.precision(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub id: String,
    #[serde(flatten)]
    pub pixels: PixelMetrics,
    pub events: EventSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f32,
    #[serde(flatten)]
    pub pixels: PixelMetrics,
    pub events: EventSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub threshold: f32,
    pub scenes: Vec<SceneReport>,
    pub aggregate: SceneReport,
    pub threshold_curve: Vec<CurvePoint>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn scene_events(prob: &Raster, gt: &Raster, tau: f32, cfg: &EvalConfig) -> Result<(Raster, EventCounts)> {
    let mask = threshold(prob, tau)?;
    let grid: RasterGrid = *mask.grid();
    let pred = connected_components(&mask, cfg.connectivity)?;
    let pred = match cfg.min_pred_area_m2 {
        Some(a) => {
            filter_segments(
                pred,
                &FilterCriteria {
                    min_area_m2: Some(a),
                    ..Default::default()
                },
            )?
            .0
        }
        None => pred,
    };
    let truth = connected_components(gt, cfg.connectivity)?;
    Ok((mask, match_events(&pred, &truth, &grid, &cfg.match_rule)))
}

fn evaluate_at(scenes: &[EvalScene], tau: f32, cfg: &EvalConfig) -> Result<(Vec<SceneReport>, SceneReport)> {
    let mut reports = Vec::with_capacity(scenes.len());
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut events = EventCounts::default();
    for s in scenes {
        let (mask, ev) = scene_events(&s.prob, &s.gt, tau, cfg)?;
        let (a, b, c) = confusion(&mask, &s.gt)?;
        tp += a;
        fp += b;
        fn_ += c;
        events = events + ev;
        reports.push(SceneReport {
            id: s.id.clone(),
            pixels: PixelMetrics::from_counts(a, b, c),
            events: ev.into(),
        });
    }
    let aggregate = SceneReport {
        id: "aggregate".into(),
        pixels: PixelMetrics::from_counts(tp, fp, fn_),
        events: events.into(),
    };
    Ok((reports, aggregate))
}

/// Per-scene and aggregate metrics at `cfg.threshold`, plus one curve point per sweep threshold.
pub fn evaluate(scenes: &[EvalScene], cfg: &EvalConfig) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Argument("nothing to evaluate".into()));
    }
    let (reports, aggregate) = evaluate_at(scenes, cfg.threshold, cfg)?;
    let mut curve = Vec::with_capacity(cfg.sweep.len());
    for &tau in &cfg.sweep {
        let (_, agg) = evaluate_at(scenes, tau, cfg)?;
        curve.push(CurvePoint {
            threshold: tau,
            pixels: agg.pixels,
            events: agg.events,
        });
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        threshold: cfg.threshold,
        scenes: reports,
        aggregate,
        threshold_curve: curve,
    })
}
