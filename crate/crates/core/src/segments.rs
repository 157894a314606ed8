//! Debris segments: connected components of a binary mask, their attributes,
//! rule-based filtering, event matching against ground truth and GeoJSON export.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::raster::{assert_aligned, Raster, RasterGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::Argument(format!("connectivity must be 4 or 8, got {other}"))),
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// A horizontal run of `len` pixels starting at `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub row: usize,
    pub col: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebrisSegment {
    pub id: u32,
    /// Row-major, non-overlapping runs.
    pub runs: Vec<Run>,
    pub pixel_count: usize,
    pub area_m2: f64,
    pub centroid: (f64, f64),
    pub mean_elevation: Option<f64>,
    pub max_elevation: Option<f64>,
    pub max_par: Option<f64>,
    pub mean_d_vv: Option<f64>,
}

impl DebrisSegment {
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.runs
            .iter()
            .flat_map(|run| (run.col..run.col + run.len).map(move |c| (run.row, c)))
    }

    pub fn indices(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        self.pixels().map(move |(r, c)| r * width + c)
    }
}

fn runs_from_sorted(pixels: &[(usize, usize)]) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for &(r, c) in pixels {
        match runs.last_mut() {
            Some(run) if run.row == r && run.col + run.len == c => run.len += 1,
            _ => runs.push(Run { row: r, col: c, len: 1 }),
        }
    }
    runs
}

fn is_foreground(mask: &Raster, i: usize) -> bool {
    mask.data()[i] == 1.0
}

/// Labels the 1-pixels of `mask`; segments are numbered from 1 in row-major discovery order.
pub fn connected_components(mask: &Raster, connectivity: Connectivity) -> Result<Vec<DebrisSegment>> {
    if mask.bands() != 1 {
        return Err(Error::Dimension("mask must be single-band".into()));
    }
    let grid = *mask.grid();
    let (w, h) = (grid.width, grid.height);
    let mut seen = vec![false; w * h];
    let mut segments = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || !is_foreground(mask, start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            pixels.push((r, c));
            for &(dr, dc) in connectivity.offsets() {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let j = rr as usize * w + cc as usize;
                if !seen[j] && is_foreground(mask, j) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        pixels.sort_unstable();
        let n = pixels.len();
        let (sum_x, sum_y) = pixels.iter().fold((0.0, 0.0), |(sx, sy), &(r, c)| {
            let (x, y) = grid.geotransform.pixel_center(r, c);
            (sx + x, sy + y)
        });
        segments.push(DebrisSegment {
            id: segments.len() as u32 + 1,
            runs: runs_from_sorted(&pixels),
            pixel_count: n,
            area_m2: n as f64 * grid.pixel_area(),
            centroid: (sum_x / n as f64, sum_y / n as f64),
            mean_elevation: None,
            max_elevation: None,
            max_par: None,
            mean_d_vv: None,
        });
    }
    Ok(segments)
}

fn mean_max(r: &Raster, seg: &DebrisSegment) -> (Option<f64>, Option<f64>) {
    let w = r.width();
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut max = f64::NEG_INFINITY;
    for i in seg.indices(w) {
        let v = r.data()[i];
        if r.is_nodata(v) {
            continue;
        }
        sum += v as f64;
        n += 1;
        max = max.max(v as f64);
    }
    if n == 0 {
        (None, None)
    } else {
        (Some(sum / n as f64), Some(max))
    }
}

/// Fills elevation, PAR and backscatter-change attributes from aligned rasters.
pub fn segment_stats(segment: &mut DebrisSegment, dem: &Raster, par: &Raster, d_vv: &Raster) -> Result<()> {
    assert_aligned([dem, par, d_vv])?;
    if let Some(run) = segment
        .runs
        .iter()
        .find(|r| r.row >= dem.height() || r.col + r.len > dem.width())
    {
        return Err(Error::Dimension(format!("run {run:?} outside the raster")));
    }
    let (mean_z, max_z) = mean_max(dem, segment);
    segment.mean_elevation = mean_z;
    segment.max_elevation = max_z;
    segment.max_par = mean_max(par, segment).1;
    segment.mean_d_vv = mean_max(d_vv, segment).0;
    Ok(())
}

/// Segment filtering rules; `None` disables a rule.
#[derive(Debug, Clone, Default)]
pub struct FilterCriteria {
    pub min_area_m2: Option<f64>,
    /// Inclusive bounds on mean elevation.
    pub elevation_range: Option<(f64, f64)>,
    /// Segments touching any 1-pixel are rejected.
    pub excluded_zones: Option<Raster>,
    pub runout_mask: Option<Raster>,
    /// Minimum fraction of segment pixels inside the runout mask.
    pub min_runout_overlap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Area,
    Elevation,
    ExcludedZone,
    Runout,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Area => "area",
            RejectReason::Elevation => "elevation",
            RejectReason::ExcludedZone => "excluded_zone",
            RejectReason::Runout => "runout",
        }
    }
}

fn overlap_count(seg: &DebrisSegment, mask: &Raster) -> usize {
    let w = mask.width();
    seg.indices(w).filter(|&i| mask.data()[i] == 1.0).count()
}

/// Splits segments into kept and rejected, recording the first failing rule.
pub fn filter_segments(
    segments: Vec<DebrisSegment>,
    criteria: &FilterCriteria,
) -> Result<(Vec<DebrisSegment>, Vec<(DebrisSegment, RejectReason)>)> {
    if !(0.0..=1.0).contains(&criteria.min_runout_overlap) {
        return Err(Error::Argument("min_runout_overlap must lie in [0, 1]".into()));
    }
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for seg in segments {
        let reason = if criteria.min_area_m2.is_some_and(|a| seg.area_m2 < a) {
            Some(RejectReason::Area)
        } else if criteria
            .elevation_range
            .is_some_and(|(lo, hi)| !seg.mean_elevation.is_some_and(|z| z >= lo && z <= hi))
        {
            Some(RejectReason::Elevation)
        } else if criteria
            .excluded_zones
            .as_ref()
            .is_some_and(|m| overlap_count(&seg, m) > 0)
        {
            Some(RejectReason::ExcludedZone)
        } else if criteria
            .runout_mask
            .as_ref()
            .is_some_and(|m| (overlap_count(&seg, m) as f64) < criteria.min_runout_overlap * seg.pixel_count as f64)
        {
            Some(RejectReason::Runout)
        } else {
            None
        };
        match reason {
            Some(r) => rejected.push((seg, r)),
            None => kept.push(seg),
        }
    }
    Ok((kept, rejected))
}

/// How predicted segments are matched to ground-truth segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRule {
    /// Minimum shared pixels for a match.
    pub min_overlap_px: usize,
    /// If set, a pair also needs at least this intersection over union.
    pub min_iou: Option<f64>,
}

impl Default for MatchRule {
    fn default() -> Self {
        Self {
            min_overlap_px: 1,
            min_iou: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub detected: usize,
    pub missed: usize,
    pub false_pos: usize,
}

impl std::ops::Add for EventCounts {
    type Output = EventCounts;

    fn add(self, other: EventCounts) -> EventCounts {
        EventCounts {
            detected: self.detected + other.detected,
            missed: self.missed + other.missed,
            false_pos: self.false_pos + other.false_pos,
        }
    }
}

impl EventCounts {
    /// Detected fraction of ground-truth events, 0 when there are none.
    pub fn recall(&self) -> f64 {
        let n = self.detected + self.missed;
        if n == 0 {
            0.0
        } else {
            self.detected as f64 / n as f64
        }
    }

    /// `detected / (detected + false_pos)`, 0 when both are zero.
    pub fn precision(&self) -> f64 {
        let n = self.detected + self.false_pos;
        if n == 0 {
            0.0
        } else {
            self.detected as f64 / n as f64
        }
    }
}

/// Counts detected and missed ground-truth events and unmatched predictions.
///
/// In overlap mode a ground-truth segment is detected when the predicted pixels
/// inside it number at least `min_overlap_px`, and a prediction is a false positive
/// when it shares fewer than `min_overlap_px` pixels with all ground truth. With
/// `min_iou`, matching is pairwise and each pair must also reach the IoU.
pub fn match_events(pred: &[DebrisSegment], gt: &[DebrisSegment], grid: &RasterGrid, rule: &MatchRule) -> EventCounts {
    let w = grid.width;
    let mut gt_label: HashMap<usize, usize> = HashMap::new();
    for (k, seg) in gt.iter().enumerate() {
        for i in seg.indices(w) {
            gt_label.insert(i, k);
        }
    }
    // Pairwise intersections (pred index, gt index) -> shared pixels.
    let mut inter: HashMap<(usize, usize), usize> = HashMap::new();
    for (p, seg) in pred.iter().enumerate() {
        for i in seg.indices(w) {
            if let Some(&g) = gt_label.get(&i) {
                *inter.entry((p, g)).or_default() += 1;
            }
        }
    }
    let min_px = rule.min_overlap_px.max(1);
    let mut gt_hit = vec![0usize; gt.len()];
    let mut pred_hit = vec![0usize; pred.len()];
    let mut gt_matched = vec![false; gt.len()];
    let mut pred_matched = vec![false; pred.len()];
    for (&(p, g), &n) in &inter {
        gt_hit[g] += n;
        pred_hit[p] += n;
        if let Some(thr) = rule.min_iou {
            let union = pred[p].pixel_count + gt[g].pixel_count - n;
            if n >= min_px && n as f64 / union as f64 >= thr {
                gt_matched[g] = true;
                pred_matched[p] = true;
            }
        }
    }
    if rule.min_iou.is_none() {
        for (m, &n) in gt_matched.iter_mut().zip(&gt_hit) {
            *m = n >= min_px;
        }
        for (m, &n) in pred_matched.iter_mut().zip(&pred_hit) {
            *m = n >= min_px;
        }
    }
    let detected = gt_matched.iter().filter(|&&m| m).count();
    EventCounts {
        detected,
        missed: gt.len() - detected,
        false_pos: pred_matched.iter().filter(|&&m| !m).count(),
    }
}

/// Traces the pixel-edge boundary rings of a segment, in pixel-corner coordinates
/// `(x = col, y = row)`. The first ring is the exterior; the rest are holes.
/// Exterior rings run clockwise on screen (counter-clockwise once y points north).
pub fn trace_rings(segment: &DebrisSegment, connectivity: Connectivity) -> Vec<Vec<(i64, i64)>> {
    let inside: std::collections::HashSet<(i64, i64)> = segment.pixels().map(|(r, c)| (r as i64, c as i64)).collect();
    let has = |r: i64, c: i64| inside.contains(&(r, c));
    // Directed boundary edges keyed by start vertex, interior on the right (screen coords).
    let mut out_edges: HashMap<(i64, i64), Vec<(i64, i64)>> = HashMap::new();
    let mut starts = Vec::new();
    for (r, c) in segment.pixels() {
        let (r, c) = (r as i64, c as i64);
        let mut push = |a: (i64, i64), b: (i64, i64)| {
            out_edges.entry(a).or_default().push(b);
            starts.push(a);
        };
        if !has(r - 1, c) {
            push((c, r), (c + 1, r));
        }
        if !has(r, c + 1) {
            push((c + 1, r), (c + 1, r + 1));
        }
        if !has(r + 1, c) {
            push((c + 1, r + 1), (c, r + 1));
        }
        if !has(r, c - 1) {
            push((c, r + 1), (c, r));
        }
    }
    starts.sort_unstable_by_key(|&(x, y)| (y, x));
    starts.dedup();

    let mut rings = Vec::new();
    for start in starts {
        while out_edges.get(&start).is_some_and(|v| !v.is_empty()) {
            let mut ring = vec![start];
            let mut prev = start;
            let mut cur = take_edge(&mut out_edges, start, None, connectivity);
            while cur != start {
                ring.push(cur);
                let heading = (cur.0 - prev.0, cur.1 - prev.1);
                let next = take_edge(&mut out_edges, cur, Some(heading), connectivity);
                prev = cur;
                cur = next;
            }
            rings.push(simplify_collinear(ring));
        }
    }
    // Exterior ring has the largest enclosed area.
    if let Some(k) = (0..rings.len()).max_by_key(|&k| (ring_area2(&rings[k]).abs(), std::cmp::Reverse(k))) {
        let ext = rings.remove(k);
        rings.insert(0, ext);
    }
    rings
}

fn take_edge(
    edges: &mut HashMap<(i64, i64), Vec<(i64, i64)>>,
    at: (i64, i64),
    heading: Option<(i64, i64)>,
    connectivity: Connectivity,
) -> (i64, i64) {
    let list = edges.get_mut(&at).expect("boundary edges form closed rings");
    let k = if list.len() == 1 {
        0
    } else {
        let (hx, hy) = heading.unwrap_or((1, 0));
        // Screen coordinates: cross > 0 is a right (clockwise) turn.
        let turn = |&(x, y): &(i64, i64)| {
            let (dx, dy) = (x - at.0, y - at.1);
            hx * dy - hy * dx
        };
        let pick_right = connectivity == Connectivity::Four;
        (0..list.len())
            .max_by_key(|&k| if pick_right { turn(&list[k]) } else { -turn(&list[k]) })
            .unwrap()
    };
    let next = list.swap_remove(k);
    if list.is_empty() {
        edges.remove(&at);
    }
    next
}

fn simplify_collinear(ring: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    let n = ring.len();
    let keep: Vec<(i64, i64)> = (0..n)
        .filter(|&i| {
            let a = ring[(i + n - 1) % n];
            let b = ring[i];
            let c = ring[(i + 1) % n];
            (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0) != 0
        })
        .map(|i| ring[i])
        .collect();
    if keep.is_empty() {
        ring
    } else {
        keep
    }
}

/// Twice the signed area (shoelace) of a closed ring.
fn ring_area2(ring: &[(i64, i64)]) -> i64 {
    let n = ring.len();
    (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum()
}

fn segment_properties(seg: &DebrisSegment) -> serde_json::Map<String, Value> {
    let mut props = serde_json::Map::new();
    props.insert("id".into(), json!(seg.id));
    props.insert("pixel_count".into(), json!(seg.pixel_count));
    props.insert("area_m2".into(), json!(seg.area_m2));
    props.insert("centroid_x".into(), json!(seg.centroid.0));
    props.insert("centroid_y".into(), json!(seg.centroid.1));
    props.insert("mean_elevation".into(), json!(seg.mean_elevation));
    props.insert("max_elevation".into(), json!(seg.max_elevation));
    props.insert("max_par".into(), json!(seg.max_par));
    props.insert("mean_d_vv".into(), json!(seg.mean_d_vv));
    props
}

fn segment_feature(seg: &DebrisSegment, grid: &RasterGrid, connectivity: Connectivity) -> Value {
    let rings: Vec<Vec<[f64; 2]>> = trace_rings(seg, connectivity)
        .into_iter()
        .map(|ring| {
            let mut pts: Vec<[f64; 2]> = ring
                .iter()
                .map(|&(x, y)| {
                    let (wx, wy) = grid.geotransform.world(x as f64, y as f64);
                    [wx, wy]
                })
                .collect();
            pts.push(pts[0]);
            pts
        })
        .collect();
    json!({
        "type": "Feature",
        "geometry": { "type": "Polygon", "coordinates": rings },
        "properties": segment_properties(seg),
    })
}

/// GeoJSON FeatureCollection of segment outlines in world coordinates.
pub fn segments_to_geojson(
    kept: &[DebrisSegment],
    rejected: Option<&[(DebrisSegment, RejectReason)]>,
    grid: &RasterGrid,
    connectivity: Connectivity,
) -> Value {
    let mut features: Vec<Value> = kept.iter().map(|s| segment_feature(s, grid, connectivity)).collect();
    for (seg, reason) in rejected.unwrap_or_default() {
        let mut f = segment_feature(seg, grid, connectivity);
        f["properties"]["reject_reason"] = json!(reason.as_str());
        features.push(f);
    }
    json!({ "type": "FeatureCollection", "features": features })
}

/// Rasterizes segments into a binary mask on `grid`.
pub fn segments_to_mask(segments: &[DebrisSegment], grid: &RasterGrid) -> Result<Raster> {
    let mut data = vec![0.0f32; grid.len()];
    for seg in segments {
        for i in seg.indices(grid.width) {
            data[i] = 1.0;
        }
    }
    Raster::new(*grid, 1, data)
}
