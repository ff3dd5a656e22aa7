//! Appearance verification of unreliable depth detections.
//!
//! Crops are resampled to 84x28 (rows x cols) and turned into three
//! channels: luma, a 2x2 tiling of the half-resolution Y/U/V planes, and a
//! 2x2 tiling of the half-resolution gradient magnitudes of Y/U/V plus
//! their elementwise maximum.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerKind};
use crate::detector::{Band, Detection};
use crate::error::{Error, Result};
use crate::geometry::DepthFrame;
use crate::grid::{Grid, Rect};

pub const CROP_ROWS: usize = 84;
pub const CROP_COLS: usize = 28;
const CELL: usize = 7;
pub const FEATURE_COUNT: usize = 3 * 2 * (CROP_ROWS / CELL) * (CROP_COLS / CELL);

const U_MAX: f64 = 0.436;
const V_MAX: f64 = 0.615;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStack {
    pub ch1: Grid<f64>,
    pub ch2: Grid<f64>,
    pub ch3: Grid<f64>,
}

impl ChannelStack {
    pub fn channels(&self) -> [&Grid<f64>; 3] {
        [&self.ch1, &self.ch2, &self.ch3]
    }

    /// Mean and variance of every 7x7 cell, channel by channel.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(FEATURE_COUNT);
        for ch in self.channels() {
            for r0 in (0..ch.rows()).step_by(CELL) {
                for c0 in (0..ch.cols()).step_by(CELL) {
                    let mut sum = 0.0;
                    let mut sq = 0.0;
                    for r in r0..r0 + CELL {
                        for &v in &ch.row(r)[c0..c0 + CELL] {
                            sum += v;
                            sq += v * v;
                        }
                    }
                    let n = (CELL * CELL) as f64;
                    let mean = sum / n;
                    out.push(mean);
                    out.push((sq / n - mean * mean).max(0.0));
                }
            }
        }
        out
    }
}

/// BT.601 conversion of an 8-bit pixel to `(Y, U, V)` with all three
/// rescaled to `[0, 1]`.
pub fn rgb_to_yuv(p: [u8; 3]) -> (f64, f64, f64) {
    yuv([p[0] as f64, p[1] as f64, p[2] as f64])
}

fn yuv(p: [f64; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (p[0] / 255.0, p[1] / 255.0, p[2] / 255.0);
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let u = -0.14713 * r - 0.28886 * g + 0.436 * b;
    let v = 0.615 * r - 0.51499 * g - 0.10001 * b;
    (
        y.clamp(0.0, 1.0),
        ((u + U_MAX) / (2.0 * U_MAX)).clamp(0.0, 1.0),
        ((v + V_MAX) / (2.0 * V_MAX)).clamp(0.0, 1.0),
    )
}

/// Bilinear resample of `rect` (inside `image`) to `rows` x `cols` with
/// pixel-center alignment.
pub fn resize_bilinear(image: &Grid<[u8; 3]>, rect: &Rect, rows: usize, cols: usize) -> Grid<[f64; 3]> {
    let axis = |dst: usize, start: i64, len: i64, limit: usize| -> Vec<(usize, usize, f64)> {
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * len as f64 / dst as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as i64;
                let i1 = (i0 + 1).min(len - 1);
                let f = s - i0 as f64;
                let clampi = |v: i64| (start + v).clamp(0, limit as i64 - 1) as usize;
                (clampi(i0), clampi(i1), f)
            })
            .collect()
    };
    let ys = axis(rows, rect.y, rect.h.max(1), image.rows());
    let xs = axis(cols, rect.x, rect.w.max(1), image.cols());
    Grid::from_fn(rows, cols, |r, c| {
        let (y0, y1, fy) = ys[r];
        let (x0, x1, fx) = xs[c];
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            let p = |y: usize, x: usize| image[(y, x)][k] as f64;
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    })
}

fn gradient_magnitude(plane: &Grid<f64>) -> Grid<f64> {
    let (rows, cols) = (plane.rows(), plane.cols());
    let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f64 };
    Grid::from_fn(rows, cols, |r, c| {
        let (c0, c1) = (c.saturating_sub(1), (c + 1).min(cols - 1));
        let (r0, r1) = (r.saturating_sub(1), (r + 1).min(rows - 1));
        let gx = diff(plane[(r, c0)], plane[(r, c1)], c1 - c0);
        let gy = diff(plane[(r0, c)], plane[(r1, c)], r1 - r0);
        ((gx * gx + gy * gy).sqrt() / std::f64::consts::SQRT_2).min(1.0)
    })
}

fn half(plane: &Grid<f64>) -> Grid<f64> {
    Grid::from_fn(plane.rows() / 2, plane.cols() / 2, |r, c| {
        0.25 * (plane[(2 * r, 2 * c)] + plane[(2 * r, 2 * c + 1)] + plane[(2 * r + 1, 2 * c)] + plane[(2 * r + 1, 2 * c + 1)])
    })
}

/// 2x2 tiling: top-left, top-right, bottom-left, bottom-right.
fn tile(quads: [&Grid<f64>; 4]) -> Grid<f64> {
    let (h, w) = (quads[0].rows(), quads[0].cols());
    Grid::from_fn(2 * h, 2 * w, |r, c| quads[(r / h) * 2 + c / w][(r % h, c % w)])
}

/// Builds the three verifier channels from an 84x28 RGB crop (values in
/// 0..=255).
pub fn channels_from_resized(crop: &Grid<[f64; 3]>) -> ChannelStack {
    let mut y = Grid::filled(crop.rows(), crop.cols(), 0.0);
    let mut u = y.clone();
    let mut v = y.clone();
    for (i, p) in crop.iter().enumerate() {
        let (yy, uu, vv) = yuv(*p);
        y.as_mut_slice()[i] = yy;
        u.as_mut_slice()[i] = uu;
        v.as_mut_slice()[i] = vv;
    }
    let (gy, gu, gv) = (gradient_magnitude(&y), gradient_magnitude(&u), gradient_magnitude(&v));
    let gmax = Grid::from_fn(y.rows(), y.cols(), |r, c| gy[(r, c)].max(gu[(r, c)]).max(gv[(r, c)]));
    let zero = Grid::filled(y.rows() / 2, y.cols() / 2, 0.0);
    let ch2 = tile([&half(&y), &half(&u), &half(&v), &zero]);
    let ch3 = tile([&half(&gy), &half(&gu), &half(&gv), &half(&gmax)]);
    ChannelStack { ch1: y, ch2, ch3 }
}

pub fn build_channels(image: &Grid<[u8; 3]>, rect: &Rect) -> ChannelStack {
    channels_from_resized(&resize_bilinear(image, rect, CROP_ROWS, CROP_COLS))
}

/// Boxes with a 3:1 height-to-width ratio around `bbox`: its re-aspected
/// copy shifted by -10/0/+10 % of the box size in x and y and scaled by
/// 0.9/1.0/1.1. Boxes poking out of the image are shifted back inside; boxes
/// larger than the image are dropped.
pub fn expand_candidates(bbox: &Rect, width: usize, height: usize) -> Vec<Rect> {
    let (cx, cy) = bbox.center();
    let mut out = Vec::new();
    for scale in [0.9, 1.0, 1.1] {
        let h = (bbox.h as f64 * scale).round().max(3.0) as i64;
        let w = ((h as f64) / 3.0).round() as i64;
        if w < 1 || h > height as i64 || w > width as i64 {
            continue;
        }
        for oy in [-0.1, 0.0, 0.1] {
            for ox in [-0.1, 0.0, 0.1] {
                let x = (cx + ox * w as f64 - w as f64 / 2.0).round() as i64;
                let y = (cy + oy * h as f64 - h as f64 / 2.0).round() as i64;
                let r = Rect::new(x.clamp(0, width as i64 - w), y.clamp(0, height as i64 - h), w, h);
                if !out.contains(&r) {
                    out.push(r);
                }
            }
        }
    }
    out
}

/// Scorer training features from one frame. Every candidate crop around a
/// positive box is a positive and around a negative box a negative. Then
/// `background` random 3:1 boxes overlapping no `avoid` box by IoU 0.2 or
/// more are added as negatives.
pub fn crop_training_features(
    frame: &DepthFrame,
    positives: &[Rect],
    negatives: &[Rect],
    avoid: &[Rect],
    background: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let rgb = frame.rgb.as_ref().ok_or(Error::MissingRgb(frame.frame_id))?;
    let (w, h) = (rgb.cols(), rgb.rows());
    let crops = |boxes: &[Rect]| -> Vec<Vec<f64>> {
        boxes
            .iter()
            .flat_map(|b| expand_candidates(b, w, h))
            .map(|c| build_channels(rgb, &c).features())
            .collect()
    };
    let pos = crops(positives);
    let mut neg = crops(negatives);
    if h < 8 {
        return Ok((pos, neg));
    }
    for _ in 0..background {
        let bh = rng.random_range(h as i64 / 8..=h as i64 * 3 / 4);
        let bw = (bh / 3).clamp(1, w as i64);
        let b = Rect::new(rng.random_range(0..=w as i64 - bw), rng.random_range(0..=h as i64 - bh), bw, bh);
        if avoid.iter().all(|p| p.iou(&b) < 0.2) {
            neg.push(build_channels(rgb, &b).features());
        }
    }
    Ok((pos, neg))
}

/// Appearance model applied to verifier crops. Must return a value in
/// `[0, 1]` and be deterministic.
pub trait AppearanceScorer: Send + Sync {
    fn score(&self, stack: &ChannelStack) -> f64;
}

/// Scores every stack with the same value.
#[derive(Clone, Copy, Debug)]
pub struct ConstantScorer(pub f64);

impl AppearanceScorer for ConstantScorer {
    fn score(&self, _: &ChannelStack) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticParams {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            iterations: 400,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

/// Logistic regression over standardized cell statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticScorer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LogisticScorer {
    /// Model with zero weights and identity standardization.
    pub fn zero() -> Self {
        Self {
            mean: vec![0.0; FEATURE_COUNT],
            scale: vec![1.0; FEATURE_COUNT],
            weights: vec![0.0; FEATURE_COUNT],
            bias: 0.0,
        }
    }

    pub fn score_features(&self, f: &[f64]) -> f64 {
        let z: f64 = f
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((x, m), s), w)| w * (x - m) / s)
            .sum();
        sigmoid(z + self.bias)
    }

    /// Full-batch gradient descent on the L2-regularized log loss.
    pub fn train(positives: &[Vec<f64>], negatives: &[Vec<f64>], params: &LogisticParams) -> Result<Self> {
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::InvalidInput("scorer training needs positives and negatives".into()));
        }
        let dim = positives[0].len();
        if positives.iter().chain(negatives).any(|f| f.len() != dim) {
            return Err(Error::InvalidInput("feature vectors differ in length".into()));
        }
        let samples: Vec<(&Vec<f64>, f64)> =
            positives.iter().map(|f| (f, 1.0)).chain(negatives.iter().map(|f| (f, 0.0))).collect();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for (f, _) in &samples {
            for (m, x) in mean.iter_mut().zip(f.iter()) {
                *m += x / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for (f, _) in &samples {
            for ((s, x), m) in scale.iter_mut().zip(f.iter()).zip(&mean) {
                *s += (x - m) * (x - m) / n;
            }
        }
        for s in &mut scale {
            *s = s.sqrt().max(1e-6);
        }
        let standardized: Vec<(Vec<f64>, f64)> = samples
            .iter()
            .map(|(f, y)| (f.iter().zip(&mean).zip(&scale).map(|((x, m), s)| (x - m) / s).collect(), *y))
            .collect();
        // Balance classes so a skewed sample mix does not shift the bias.
        let pos_w = n / (2.0 * positives.len() as f64);
        let neg_w = n / (2.0 * negatives.len() as f64);
        let mut weights = vec![0.0; dim];
        let mut bias = 0.0;
        let mut grad = vec![0.0; dim];
        for _ in 0..params.iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for (x, y) in &standardized {
                let z: f64 = x.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>() + bias;
                let sample_w = if *y > 0.5 { pos_w } else { neg_w };
                let e = (sigmoid(z) - y) * sample_w;
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g += e * xi;
                }
                grad_b += e;
            }
            for (w, g) in weights.iter_mut().zip(&grad) {
                *w -= params.learning_rate * (g / n + params.l2 * *w);
            }
            bias -= params.learning_rate * grad_b / n;
        }
        Ok(Self {
            mean,
            scale,
            weights,
            bias,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice()).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Parameters are stored as 64-bit floats so a reload scores identically.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        container::write_header(w, ContainerKind::Scorer)?;
        w.write_u32::<LittleEndian>(self.weights.len() as u32)?;
        for v in self.mean.iter().chain(&self.scale).chain(&self.weights) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        w.write_f64::<LittleEndian>(self.bias)
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<Self> {
        container::read_header(r, ContainerKind::Scorer)?;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        if dim != FEATURE_COUNT {
            return Err(container::invalid(&format!("expected {FEATURE_COUNT} features, found {dim}")));
        }
        let mut read = |n: usize| -> std::io::Result<Vec<f64>> {
            let mut v = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            Ok(v)
        };
        let mean = read(dim)?;
        let scale = read(dim)?;
        let weights = read(dim)?;
        let bias = read(1)?[0];
        if scale.iter().any(|s| !(*s > 0.0)) {
            return Err(container::invalid("nonpositive feature scale"));
        }
        Ok(Self {
            mean,
            scale,
            weights,
            bias,
        })
    }
}

impl AppearanceScorer for LogisticScorer {
    fn score(&self, stack: &ChannelStack) -> f64 {
        self.score_features(&stack.features())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub accept_threshold: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { accept_threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifierVerdict {
    pub original_score: f64,
    pub verified_score: f64,
    pub accepted: bool,
    pub candidate_count: usize,
}

/// Best appearance score over the candidate boxes around the detection.
pub fn verify(
    detection: &Detection,
    frame: &DepthFrame,
    scorer: &dyn AppearanceScorer,
    cfg: &VerifyConfig,
) -> Result<VerifierVerdict> {
    let rgb = frame.rgb.as_ref().ok_or(Error::MissingRgb(frame.frame_id))?;
    let candidates = expand_candidates(&detection.bbox, rgb.cols(), rgb.rows());
    let verified_score = candidates
        .iter()
        .map(|c| scorer.score(&build_channels(rgb, c)).clamp(0.0, 1.0))
        .fold(0.0, f64::max);
    Ok(VerifierVerdict {
        original_score: detection.score,
        verified_score,
        accepted: verified_score >= cfg.accept_threshold,
        candidate_count: candidates.len(),
    })
}

/// Verifies every unreliable detection of a frame. Accepted ones keep their
/// depth score and gain `verified_score`; rejected ones are dropped.
/// Reliable detections pass through untouched.
pub fn apply_verifier(
    detections: Vec<Detection>,
    frame: &DepthFrame,
    scorer: &dyn AppearanceScorer,
    cfg: &VerifyConfig,
) -> Result<Vec<Detection>> {
    let mut out = Vec::with_capacity(detections.len());
    for mut d in detections {
        if d.band != Band::Unreliable {
            out.push(d);
            continue;
        }
        let verdict = verify(&d, frame, scorer, cfg)?;
        if verdict.accepted {
            d.verified_score = Some(verdict.verified_score);
            out.push(d);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Grid<[u8; 3]> {
        Grid::from_fn(rows, cols, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn frame_with(rgb: Grid<[u8; 3]>) -> DepthFrame {
        let (h, w) = (rgb.rows(), rgb.cols());
        let k = CameraIntrinsics::new(500.0, 500.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
        DepthFrame::new(Grid::filled(h, w, Some(3.0)), Some(rgb), k, 7).unwrap()
    }

    fn det(bbox: Rect, score: f64, band: Band) -> Detection {
        Detection {
            bbox,
            score,
            band,
            distance_m: 4.0,
            template_id: 0,
            verified_score: None,
        }
    }

    #[test]
    fn centred_box_has_27_candidates_with_3_to_1_aspect() {
        let c = expand_candidates(&Rect::new(300, 200, 40, 120), 640, 480);
        assert_eq!(c.len(), 27);
        let corner = expand_candidates(&Rect::new(0, 0, 40, 120), 640, 480);
        assert!(corner.len() < 27);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let h = rng.random_range(10..300);
            let w = rng.random_range(5..200);
            let b = Rect::new(rng.random_range(0..640 - w), rng.random_range(0..480 - h), w, h);
            for r in expand_candidates(&b, 640, 480) {
                assert!(r.inside(640, 480));
                assert!((r.h as f64 / r.w as f64 - 3.0).abs() <= 3.0 / r.w as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn uniform_crop_has_no_gradient() {
        let img = Grid::filled(100, 50, [120, 60, 200]);
        let s = build_channels(&img, &Rect::new(5, 5, 30, 90));
        assert!(s.ch3.iter().all(|&v| v.abs() < 1e-12));
        for ch in s.channels() {
            assert_eq!((ch.rows(), ch.cols()), (CROP_ROWS, CROP_COLS));
            assert!(ch.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn white_is_full_luma() {
        let (y, u, v) = rgb_to_yuv([255, 255, 255]);
        assert!((y - 1.0).abs() < 1e-12);
        assert!((u - 0.5).abs() < 1e-3 && (v - 0.5).abs() < 1e-3);
    }

    #[test]
    fn luma_matches_scalar_conversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, CROP_ROWS, CROP_COLS);
        let s = build_channels(&img, &Rect::new(0, 0, CROP_COLS as i64, CROP_ROWS as i64));
        for r in 0..CROP_ROWS {
            for c in 0..CROP_COLS {
                let p = img[(r, c)];
                let y = (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0;
                assert!((s.ch1[(r, c)] - y).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, CROP_ROWS, CROP_COLS);
        let full = Rect::new(0, 0, CROP_COLS as i64, CROP_ROWS as i64);
        let once = resize_bilinear(&img, &full, CROP_ROWS, CROP_COLS);
        for (a, b) in once.iter().zip(img.iter()) {
            for k in 0..3 {
                assert_eq!(a[k], b[k] as f64);
            }
        }
        assert_eq!(build_channels(&img, &full), channels_from_resized(&once));
    }

    #[test]
    fn quadrant_layout() {
        let img = Grid::filled(CROP_ROWS, CROP_COLS, [200, 30, 90]);
        let s = build_channels(&img, &Rect::new(0, 0, CROP_COLS as i64, CROP_ROWS as i64));
        let (y, u, v) = rgb_to_yuv([200, 30, 90]);
        assert!((s.ch2[(0, 0)] - y).abs() < 1e-12);
        assert!((s.ch2[(0, 20)] - u).abs() < 1e-12);
        assert!((s.ch2[(50, 0)] - v).abs() < 1e-12);
        assert_eq!(s.ch2[(50, 20)], 0.0);
    }

    #[test]
    fn zero_model_scores_half_and_scores_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let zero = ChannelStack {
            ch1: Grid::filled(CROP_ROWS, CROP_COLS, 0.0),
            ch2: Grid::filled(CROP_ROWS, CROP_COLS, 0.0),
            ch3: Grid::filled(CROP_ROWS, CROP_COLS, 0.0),
        };
        assert_eq!(LogisticScorer::zero().score(&zero), 0.5);
        let mut model = LogisticScorer::zero();
        model.weights.iter_mut().for_each(|w| *w = rng.random_range(-50.0..50.0));
        for _ in 0..20 {
            let img = random_image(&mut rng, 90, 40);
            let s = model.score(&build_channels(&img, &Rect::new(0, 0, 40, 90)));
            assert!((0.0..=1.0).contains(&s));
        }
    }

    /// Dark vertical bar on a bright background versus flat crops.
    fn bar_image(rng: &mut ChaCha8Rng, bar: bool) -> Grid<[u8; 3]> {
        let base: u8 = rng.random_range(150..230);
        Grid::from_fn(84, 28, |r, c| {
            let noise = rng.random_range(0..10);
            if bar && (9..19).contains(&c) && r > 10 {
                [40 + noise, 30 + noise, 35 + noise]
            } else {
                [base + noise, base + noise, base - 20 + noise]
            }
        })
    }

    #[test]
    fn trained_scorer_separates_its_training_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let full = Rect::new(0, 0, 28, 84);
        let pos: Vec<Vec<f64>> = (0..40).map(|_| build_channels(&bar_image(&mut rng, true), &full).features()).collect();
        let neg: Vec<Vec<f64>> = (0..40).map(|_| build_channels(&bar_image(&mut rng, false), &full).features()).collect();
        let model = LogisticScorer::train(&pos, &neg, &LogisticParams::default()).unwrap();
        let mean_pos = pos.iter().map(|f| model.score_features(f)).sum::<f64>() / pos.len() as f64;
        let mean_neg = neg.iter().map(|f| model.score_features(f)).sum::<f64>() / neg.len() as f64;
        assert!(mean_pos > 0.5 && mean_neg < 0.5);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        model.save(&path).unwrap();
        assert_eq!(LogisticScorer::load(&path).unwrap(), model);
    }

    #[test]
    fn constant_scorer_accepts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frame = frame_with(random_image(&mut rng, 200, 200));
        let d = det(Rect::new(80, 40, 30, 90), 0.6, Band::Unreliable);
        let v = verify(&d, &frame, &ConstantScorer(1.0), &VerifyConfig::default()).unwrap();
        assert!(v.accepted);
        assert_eq!(v.verified_score, 1.0);
        assert_eq!(v.original_score, 0.6);
        assert_eq!(v.candidate_count, 27);
    }

    #[test]
    fn missing_rgb_is_an_error() {
        let mut frame = frame_with(Grid::filled(50, 50, [0, 0, 0]));
        frame.rgb = None;
        let d = det(Rect::new(10, 10, 10, 30), 0.6, Band::Unreliable);
        assert!(matches!(verify(&d, &frame, &ConstantScorer(1.0), &VerifyConfig::default()), Err(Error::MissingRgb(7))));
    }

    struct MeanLuma;

    impl AppearanceScorer for MeanLuma {
        fn score(&self, stack: &ChannelStack) -> f64 {
            stack.ch1.iter().sum::<f64>() / stack.ch1.len() as f64
        }
    }

    #[test]
    fn verdict_is_max_over_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let frame = frame_with(random_image(&mut rng, 240, 320));
        let d = det(Rect::new(100, 60, 35, 100), 0.5, Band::Unreliable);
        let v = verify(&d, &frame, &MeanLuma, &VerifyConfig::default()).unwrap();
        let rgb = frame.rgb.as_ref().unwrap();
        let mut cands = expand_candidates(&d.bbox, 320, 240);
        cands.reverse();
        let best = cands.iter().map(|c| MeanLuma.score(&build_channels(rgb, c))).fold(0.0, f64::max);
        assert_eq!(v.verified_score, best);
    }

    #[test]
    fn apply_keeps_reliable_and_drops_rejected_unreliable() {
        let frame = frame_with(Grid::filled(200, 200, [10, 10, 10]));
        let dets = vec![
            det(Rect::new(10, 10, 20, 60), 0.9, Band::Reliable),
            det(Rect::new(100, 10, 20, 60), 0.5, Band::Unreliable),
        ];
        let out = apply_verifier(dets.clone(), &frame, &ConstantScorer(0.1), &VerifyConfig::default()).unwrap();
        assert_eq!(out, vec![dets[0].clone()]);
        let out = apply_verifier(dets.clone(), &frame, &ConstantScorer(0.9), &VerifyConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].bbox, dets[1].bbox);
        assert_eq!(out[1].band, Band::Unreliable);
        assert_eq!(out[1].verified_score, Some(0.9));

        let mut last = usize::MAX;
        for th in [0.0, 0.3, 0.6, 0.95] {
            let n = apply_verifier(dets.clone(), &frame, &MeanLuma, &VerifyConfig { accept_threshold: th })
                .unwrap()
                .len();
            assert!(n <= last);
            last = n;
        }
    }
}
