//! Sliding-window depth template matching inside ROIs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DepthFrame;
use crate::grid::{Grid, Rect};
use crate::patch::{self, REFERENCE_SIZE};
use crate::roi::Roi;
use crate::template::{TemplateKind, TemplateSet, WeightedTemplate};
use crate::training::Annotation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub th_hard: f64,
    pub th_soft: f64,
    /// tau in `exp(-d / tau)`, squared meters.
    pub score_scale: f64,
    /// Horizontal window step, template pixels.
    pub stride: usize,
    pub nms_overlap: f64,
    /// Half-width of the local-maximum neighborhood, columns.
    pub maxima_window: usize,
    /// Columns on each side of an anchor that are also compared.
    pub anchor_radius: usize,
    /// Normalized depth (meters behind the reference median) up to which a
    /// pixel counts as foreground for the contour.
    pub foreground_band: f64,
    /// Extra horizontal search on each side of the ROI, template pixels.
    pub search_margin: usize,
    /// Normalized depths are clamped to `[-clip, clip]`.
    pub clip: f64,
    pub reference_size: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            th_hard: 0.3,
            th_soft: 0.8,
            score_scale: 3.0,
            stride: 4,
            nms_overlap: 0.5,
            maxima_window: 5,
            anchor_radius: 20,
            foreground_band: 0.5,
            search_margin: 16,
            clip: 1.0,
            reference_size: REFERENCE_SIZE,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.th_hard
            && self.th_hard < self.th_soft
            && self.th_soft <= 1.0
            && self.score_scale > 0.0
            && self.score_scale.is_finite()
            && self.stride >= 1
            && (0.0..=1.0).contains(&self.nms_overlap)
            && self.clip > 0.0
            && self.reference_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid match configuration: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Rejected,
    Unreliable,
    Reliable,
}

impl Band {
    pub fn as_str(self) -> &'static str {
        match self {
            Band::Rejected => "rejected",
            Band::Unreliable => "unreliable",
            Band::Reliable => "reliable",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Rect,
    pub score: f64,
    pub band: Band,
    pub distance_m: f64,
    pub template_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified_score: Option<f64>,
}

/// A normalized window cut from an ROI.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub values: Grid<f64>,
    pub valid: Grid<bool>,
    /// Template pixels per image pixel.
    pub scale: f64,
    /// Left edge of the window in scaled ROI coordinates (0 = ROI left edge).
    pub col0: i64,
    /// Median depth of the reference patch before normalization, meters.
    pub median: f64,
}

impl Window {
    /// Image-space column span `[x0, x1)` covered by window columns `[a, b)`.
    pub fn image_columns(&self, roi: &Rect, a: usize, b: usize) -> (i64, i64) {
        let x0 = roi.x as f64 + (self.col0 + a as i64) as f64 / self.scale;
        let x1 = roi.x as f64 + (self.col0 + b as i64) as f64 / self.scale;
        (x0.floor() as i64, x1.ceil() as i64)
    }

    pub fn into_annotation(self, source_id: impl Into<String>) -> Result<Annotation> {
        Annotation::new(self.values, self.valid, self.median, source_id)
    }
}

/// Raw (unnormalized) rescaled ROI strip covering every window position.
struct Strip {
    values: Grid<f64>,
    valid: Grid<bool>,
    scale: f64,
    /// Scaled ROI coordinate of strip column 0.
    col0: i64,
}

fn build_strip(frame: &DepthFrame, bbox: &Rect, rows: usize, col0: i64, cols: usize) -> Result<Strip> {
    let bbox = bbox.clip(frame.width(), frame.height());
    if bbox.is_empty() {
        return Err(Error::EmptyRoi);
    }
    let scale = rows as f64 / bbox.h as f64;
    let src_rows: Vec<usize> = (0..rows)
        .map(|r| bbox.y as usize + patch::nearest_source(r, rows, bbox.h as usize))
        .collect();
    let src_cols: Vec<Option<usize>> = (0..cols)
        .map(|c| {
            let x = (col0 + c as i64) as f64 + 0.5;
            let src = (x / scale).floor();
            (x >= 0.0 && src < bbox.w as f64).then(|| bbox.x as usize + src as usize)
        })
        .collect();
    let mut values = Grid::filled(rows, cols, 0.0);
    let mut valid = Grid::filled(rows, cols, false);
    let mut any = false;
    for (r, &sr) in src_rows.iter().enumerate() {
        let depth_row = frame.depth.row(sr);
        for (c, sc) in src_cols.iter().enumerate() {
            if let Some(d) = sc.and_then(|sc| depth_row[sc]) {
                values[(r, c)] = f64::from(d);
                valid[(r, c)] = true;
                any = true;
            }
        }
    }
    if !any {
        return Err(Error::EmptyRoi);
    }
    Ok(Strip {
        values,
        valid,
        scale,
        col0,
    })
}

fn window_from_strip(strip: &Strip, start: usize, cols: usize, cfg: &MatchConfig) -> Result<Window> {
    let rows = strip.values.rows();
    let mut values = Grid::filled(rows, cols, 0.0);
    let mut valid = Grid::filled(rows, cols, false);
    for r in 0..rows {
        let src_v = &strip.values.row(r)[start..start + cols];
        let src_m = &strip.valid.row(r)[start..start + cols];
        let base = r * cols;
        values.as_mut_slice()[base..base + cols].copy_from_slice(src_v);
        valid.as_mut_slice()[base..base + cols].copy_from_slice(src_m);
    }
    let Some((median, _)) = patch::reference_median(&values, &valid, cfg.reference_size) else {
        return Err(Error::EmptyRoi);
    };
    patch::subtract_and_clip(&mut values, &valid, median, cfg.clip);
    Ok(Window {
        values,
        valid,
        scale: strip.scale,
        col0: strip.col0 + start as i64,
        median,
    })
}

/// Scaled ROI width and the centered window's left edge.
fn centred_col0(bbox: &Rect, rows: usize, cols: usize) -> (f64, i64) {
    let scaled_w = bbox.w as f64 * rows as f64 / bbox.h as f64;
    (scaled_w, (scaled_w / 2.0 - cols as f64 / 2.0).round() as i64)
}

/// Crops the ROI, rescales it so the box height equals `rows`, and returns
/// the median-normalized window shifted `offset` template pixels right of
/// center.
pub fn prepare_roi_window(
    frame: &DepthFrame,
    roi: &Roi,
    rows: usize,
    cols: usize,
    offset: i64,
    cfg: &MatchConfig,
) -> Result<Window> {
    let bbox = roi.bbox.clip(frame.width(), frame.height());
    if bbox.is_empty() {
        return Err(Error::EmptyRoi);
    }
    let (_, centre) = centred_col0(&bbox, rows, cols);
    let strip = build_strip(frame, &bbox, rows, centre + offset, cols)?;
    window_from_strip(&strip, 0, cols, cfg)
}

/// Topmost foreground row per column; `None` where a column has none.
pub fn extract_contour(values: &Grid<f64>, valid: &Grid<bool>, foreground_band: f64) -> Result<Vec<Option<usize>>> {
    let mut contour = vec![None; values.cols()];
    let mut remaining = values.cols();
    for r in 0..values.rows() {
        if remaining == 0 {
            break;
        }
        let vals = values.row(r);
        let oks = valid.row(r);
        for c in 0..values.cols() {
            if contour[c].is_none() && oks[c] && vals[c] <= foreground_band {
                contour[c] = Some(r);
                remaining -= 1;
            }
        }
    }
    if contour.iter().all(Option::is_none) {
        return Err(Error::NoForeground);
    }
    Ok(contour)
}

/// Columns whose contour is at least as high as every present contour
/// within `window` columns. Runs of equal height report their leftmost
/// column only.
pub fn local_maxima(contour: &[Option<usize>], window: usize) -> Vec<usize> {
    let n = contour.len();
    let qualifies = |c: usize| -> bool {
        let Some(row) = contour[c] else { return false };
        let lo = c.saturating_sub(window);
        let hi = (c + window).min(n - 1);
        (lo..=hi).all(|j| contour[j].is_none_or(|other| row <= other))
    };
    let q: Vec<bool> = (0..n).map(qualifies).collect();
    (0..n)
        .filter(|&c| q[c] && !(c > 0 && q[c - 1] && contour[c - 1] == contour[c]))
        .collect()
}

/// Sorted, deduplicated evaluation columns around the anchors.
pub fn anchor_columns(anchors: &[usize], radius: usize, cols: usize) -> Vec<usize> {
    let mut out: Vec<usize> = anchors
        .iter()
        .flat_map(|&a| a.saturating_sub(radius)..(a + radius + 1).min(cols))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Mean of `w * (t - x)^2` over the given columns and every row, counting
/// only pixels valid in the window and defined in the template.
pub fn template_distance(
    values: &Grid<f64>,
    valid: &Grid<bool>,
    template: &WeightedTemplate,
    columns: &[usize],
) -> Result<f64> {
    let t = &template.template.values;
    let w = &template.weights;
    if !values.same_shape(t) || !valid.same_shape(t) {
        return Err(Error::InvalidInput("window and template differ in shape".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in 0..values.rows() {
        let (xv, ok, tv, wv) = (values.row(r), valid.row(r), t.row(r), w.row(r));
        for &c in columns {
            if ok[c] && !tv[c].is_nan() {
                let d = tv[c] - xv[c];
                sum += wv[c] * (d * d);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(sum / n as f64)
}

pub fn distance_to_score(d: f64, tau: f64) -> f64 {
    (-d / tau).exp()
}

pub fn classify_score(s: f64, cfg: &MatchConfig) -> Band {
    if s < cfg.th_hard {
        Band::Rejected
    } else if s < cfg.th_soft {
        Band::Unreliable
    } else {
        Band::Reliable
    }
}

/// Distance of the window to the set: the minimum over orientation
/// members (ties to the lowest id), or the member whose range contains
/// `roi_distance`.
pub fn match_multi(
    values: &Grid<f64>,
    valid: &Grid<bool>,
    set: &TemplateSet,
    roi_distance: f64,
    columns: &[usize],
) -> Result<(f64, usize)> {
    match set.kind {
        TemplateKind::Single => Ok((template_distance(values, valid, &set.members[0], columns)?, 0)),
        TemplateKind::Distance => {
            let id = set.range_index(roi_distance).expect("distance set has ranges");
            Ok((template_distance(values, valid, &set.members[id], columns)?, id))
        }
        TemplateKind::Orientation => {
            let mut best: Option<(f64, usize)> = None;
            let mut last_err = None;
            for (id, m) in set.members.iter().enumerate() {
                match template_distance(values, valid, m, columns) {
                    Ok(d) if best.is_none_or(|b| d < b.0) => best = Some((d, id)),
                    Ok(_) => {}
                    Err(e) => last_err = Some(e),
                }
            }
            best.ok_or_else(|| last_err.unwrap_or(Error::NoOverlap))
        }
    }
}

fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| (a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h).cmp(&(b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h)))
    });
}

/// Greedy suppression: keep the highest-scoring box, drop every box whose
/// IoU with a kept box exceeds `overlap`.
pub fn non_maximum_suppression(mut dets: Vec<Detection>, overlap: f64) -> Vec<Detection> {
    sort_detections(&mut dets);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= overlap) {
            kept.push(d);
        }
    }
    kept
}

/// Every non-rejected window candidate of one ROI, before suppression.
pub fn detect_roi(frame: &DepthFrame, roi: &Roi, set: &TemplateSet, cfg: &MatchConfig) -> Result<Vec<Detection>> {
    let (rows, cols) = (set.members[0].rows(), set.members[0].cols());
    let bbox = roi.bbox.clip(frame.width(), frame.height());
    if bbox.is_empty() {
        return Err(Error::EmptyRoi);
    }
    let (scaled_w, centre) = centred_col0(&bbox, rows, cols);
    let reach = ((scaled_w - cols as f64) / 2.0).max(0.0) as usize + cfg.search_margin;
    let steps = (reach / cfg.stride) as i64;
    let stride = cfg.stride as i64;
    let start = centre - steps * stride;
    let strip_cols = (2 * steps * stride) as usize + cols;
    let strip = build_strip(frame, &bbox, rows, start, strip_cols)?;

    let spans: Vec<(usize, usize)> = set.members.iter().map(|m| m.foreground_span(cfg.foreground_band)).collect();
    let mut out = Vec::new();
    for k in 0..=(2 * steps) as usize {
        let window = match window_from_strip(&strip, k * cfg.stride, cols, cfg) {
            Ok(w) => w,
            Err(_) => continue,
        };
        let Ok(contour) = extract_contour(&window.values, &window.valid, cfg.foreground_band) else {
            continue;
        };
        let anchors = local_maxima(&contour, cfg.maxima_window);
        let columns = anchor_columns(&anchors, cfg.anchor_radius, cols);
        let Ok((d, id)) = match_multi(&window.values, &window.valid, set, roi.distance_m, &columns) else {
            continue;
        };
        let score = distance_to_score(d, cfg.score_scale);
        let band = classify_score(score, cfg);
        if band == Band::Rejected {
            continue;
        }
        let (a, b) = spans[id];
        let (x0, x1) = window.image_columns(&bbox, a, b);
        let span = Rect::new(x0, bbox.y, x1 - x0, bbox.h).intersect(&bbox);
        out.push(Detection {
            bbox: if span.is_empty() { bbox } else { span },
            score,
            band,
            distance_m: roi.distance_m,
            template_id: id,
            verified_score: None,
        });
    }
    Ok(out)
}

/// Runs the matcher over every ROI, suppresses overlaps and returns the
/// survivors by descending score.
pub fn detect(frame: &DepthFrame, rois: &[Roi], set: &TemplateSet, cfg: &MatchConfig) -> Vec<Detection> {
    let mut all = Vec::new();
    for (i, roi) in rois.iter().enumerate() {
        match detect_roi(frame, roi, set, cfg) {
            Ok(d) => all.extend(d),
            Err(e) => log::debug!("frame {}: roi {i} skipped: {e}", frame.frame_id),
        }
    }
    non_maximum_suppression(all, cfg.nms_overlap)
}
