//! Ground-truth matching and recall versus false-positives-per-image curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::grid::Rect;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(flatten)]
    pub rect: Rect,
    #[serde(default)]
    pub ignore: bool,
}

/// Ground truth keyed by frame id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruthSet {
    pub frames: BTreeMap<u64, Vec<GtBox>>,
}

impl GroundTruthSet {
    pub fn insert(&mut self, frame_id: u64, boxes: Vec<GtBox>) -> Result<()> {
        if boxes.iter().any(|b| b.rect.is_empty()) {
            return Err(Error::InvalidInput(format!("frame {frame_id}: empty ground-truth box")));
        }
        if self.frames.insert(frame_id, boxes).is_some() {
            return Err(Error::InvalidInput(format!("duplicate ground-truth frame {frame_id}")));
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Number of boxes that count towards recall.
    pub fn n_positive(&self) -> usize {
        self.frames.values().flatten().filter(|b| !b.ignore).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchLabel {
    Tp,
    Fp,
    /// Matched an ignore region; counts neither way.
    Ignored,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledScore {
    pub frame_id: u64,
    pub score: f64,
    pub label: MatchLabel,
}

/// Detections of one frame in descending score order (ties by box).
fn ranked(dets: &[Detection]) -> Vec<&Detection> {
    let mut v: Vec<&Detection> = dets.iter().collect();
    v.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| (a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h).cmp(&(b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h)))
    });
    v
}

/// Greedy matching per frame: each detection, best first, claims the
/// unmatched positive box with the highest IoU at or above `overlap_min`.
/// Failing that, a detection overlapping an ignore box is ignored.
pub fn match_detections(
    dets: &BTreeMap<u64, Vec<Detection>>,
    gt: &GroundTruthSet,
    overlap_min: f64,
) -> Result<Vec<LabeledScore>> {
    let mut out = Vec::new();
    for (&frame_id, frame_dets) in dets {
        let boxes = gt
            .frames
            .get(&frame_id)
            .ok_or_else(|| Error::FrameMismatch(format!("detections for frame {frame_id} have no ground truth")))?;
        let mut taken = vec![false; boxes.len()];
        for d in ranked(frame_dets) {
            let mut best: Option<(f64, usize)> = None;
            for (i, b) in boxes.iter().enumerate() {
                if b.ignore || taken[i] {
                    continue;
                }
                let iou = d.bbox.iou(&b.rect);
                if iou >= overlap_min && best.is_none_or(|(bi, _)| iou > bi) {
                    best = Some((iou, i));
                }
            }
            let label = if let Some((_, i)) = best {
                taken[i] = true;
                MatchLabel::Tp
            } else if boxes.iter().any(|b| b.ignore && d.bbox.iou(&b.rect) >= overlap_min) {
                MatchLabel::Ignored
            } else {
                MatchLabel::Fp
            };
            out.push(LabeledScore {
                frame_id,
                score: d.score,
                label,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCurve {
    /// One point per distinct score, highest threshold first.
    pub points: Vec<CurvePoint>,
    pub frames: usize,
}

impl EvalCurve {
    /// Best recall reachable without exceeding `fppi`.
    pub fn recall_at_fppi(&self, fppi: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fppi <= fppi)
            .map(|p| p.recall)
            .fold(0.0, f64::max)
    }

    /// Lowest fppi at which recall reaches `recall`.
    pub fn fppi_at_recall(&self, recall: f64) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.recall >= recall)
            .map(|p| p.fppi)
            .min_by(f64::total_cmp)
    }

    pub fn max_recall(&self) -> f64 {
        self.points.iter().map(|p| p.recall).fold(0.0, f64::max)
    }

    /// Area under the recall-versus-fppi step curve over `[0, max_fppi]`,
    /// divided by `max_fppi`.
    pub fn normalized_area(&self, max_fppi: f64) -> f64 {
        let mut area = 0.0;
        let mut x = 0.0;
        let mut r = self.recall_at_fppi(0.0);
        let mut xs: Vec<f64> = self.points.iter().map(|p| p.fppi).filter(|&f| f > 0.0 && f <= max_fppi).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        for next in xs {
            area += (next - x) * r;
            x = next;
            r = r.max(self.recall_at_fppi(next));
        }
        area += (max_fppi - x) * r;
        area / max_fppi
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fppi,recall\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", fmt_threshold(p.threshold), p.fppi, p.recall);
        }
        s
    }
}

fn fmt_threshold(t: f64) -> String {
    if t.is_infinite() {
        "inf".into()
    } else {
        t.to_string()
    }
}

/// Recall and fppi after every distinct score threshold.
pub fn compute_curve(labeled: &[LabeledScore], n_gt: usize, n_frames: usize) -> Result<EvalCurve> {
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    if n_frames == 0 {
        return Err(Error::InvalidInput("curve needs at least one frame".into()));
    }
    let mut counted: Vec<&LabeledScore> = labeled.iter().filter(|l| l.label != MatchLabel::Ignored).collect();
    counted.sort_by(|a, b| b.score.total_cmp(&a.score));
    if counted.is_empty() {
        return Ok(EvalCurve {
            points: vec![CurvePoint {
                threshold: f64::INFINITY,
                fppi: 0.0,
                recall: 0.0,
            }],
            frames: n_frames,
        });
    }
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, l) in counted.iter().enumerate() {
        match l.label {
            MatchLabel::Tp => tp += 1,
            _ => fp += 1,
        }
        if counted.get(i + 1).is_none_or(|n| n.score != l.score) {
            points.push(CurvePoint {
                threshold: l.score,
                fppi: fp as f64 / n_frames as f64,
                recall: tp as f64 / n_gt as f64,
            });
        }
    }
    Ok(EvalCurve {
        points,
        frames: n_frames,
    })
}

/// Matches and builds the curve in one step.
pub fn evaluate(dets: &BTreeMap<u64, Vec<Detection>>, gt: &GroundTruthSet, overlap_min: f64) -> Result<EvalCurve> {
    let labeled = match_detections(dets, gt, overlap_min)?;
    compute_curve(&labeled, gt.n_positive(), gt.n_frames())
}

impl EvalCurve {
    /// Fppi once every detection is kept.
    pub fn final_fppi(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.fppi)
    }
}

/// Index of the best curve in a family: largest normalized area over the
/// fppi span the family covers (the largest final fppi among them). When no
/// curve has a false positive, the largest maximum recall wins. Equal
/// scores go to the curve with the lower final fppi, then the earlier one.
pub fn best_curve(curves: &[&EvalCurve]) -> Option<usize> {
    let span = curves.iter().map(|c| c.final_fppi()).fold(0.0, f64::max);
    let key = |c: &EvalCurve| if span > 0.0 { c.normalized_area(span) } else { c.max_recall() };
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, c) in curves.iter().enumerate() {
        let (k, f) = (key(c), c.final_fppi());
        let better = match best {
            None => true,
            Some((_, bk, bf)) => k > bk + 1e-12 || ((k - bk).abs() <= 1e-12 && f < bf),
        };
        if better {
            best = Some((i, k, f));
        }
    }
    best.map(|(i, _, _)| i)
}

/// Self-contained SVG line plot of one or more curves.
pub fn curves_to_svg(curves: &[(String, &EvalCurve)], max_fppi: f64) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let sx = |f: f64| M + f.min(max_fppi) / max_fppi * (W - 2.0 * M);
    let sy = |r: f64| H - M - r * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M},{} L{M},{} L{},{}" stroke="black" fill="none"/>"#,
        M,
        H - M,
        W - M,
        H - M
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.2}</text>"#, sx(f * max_fppi), H - M + 16.0, f * max_fppi);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#, M - 6.0, sy(f) + 4.0, f);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">false positives per image</text>"#, W / 2.0, H - 8.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">recall</text>"#, H / 2.0, H / 2.0);
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = format!("M{:.2},{:.2}", sx(0.0), sy(curve.recall_at_fppi(0.0)));
        let mut last_r = curve.recall_at_fppi(0.0);
        for p in curve.points.iter().filter(|p| p.fppi <= max_fppi) {
            let _ = write!(d, " L{:.2},{:.2} L{:.2},{:.2}", sx(p.fppi), sy(last_r), sx(p.fppi), sy(p.recall.max(last_r)));
            last_r = p.recall.max(last_r);
        }
        let _ = write!(d, " L{:.2},{:.2}", sx(max_fppi), sy(last_r));
        let _ = writeln!(s, r#"<path d="{d}" stroke="{color}" stroke-width="1.5" fill="none"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            W - M - 150.0,
            H - M - 12.0 - 14.0 * i as f64,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
