//! Configuration and the per-frame depth pipeline: ground plane, structure
//! labels, ROIs, template matching and optional verification.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{self, Band, Detection, MatchConfig};
use crate::error::{Error, Result};
use crate::geometry::{backproject_strided, fit_plane_ransac, DepthFrame, GroundPlane, Point3, RansacParams};
use crate::labeling::{build_occupancy, label_structure, select_low_density, HeightBands};
use crate::roi::{extract_rois, Roi, RoiConfig};
use crate::evaluation::{evaluate, EvalCurve, GroundTruthSet};
use crate::template::{ranges_from_boundaries, TemplateSet};
use crate::training::{train_distance_set, train_orientation_set, Annotation, NormalizeParams};
use crate::verifier::{apply_verifier, verify, AppearanceScorer, LogisticParams, VerifyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPlane {
    pub normal: [f64; 3],
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaneConfig {
    /// Camera height used for the rough plane that seeds the occupancy map.
    pub camera_height_m: f64,
    /// Pixel stride of the back-projection used for plane fitting.
    pub stride: usize,
    pub cell_size: f64,
    /// Cells holding at most this many points are ground candidates.
    pub low_density_threshold: u32,
    /// Candidate points are thinned evenly to at most this many.
    pub max_points: usize,
    pub ransac: RansacParams,
    /// Skip estimation and use this plane (fixed camera rigs).
    pub fixed: Option<FixedPlane>,
}

impl Default for PlaneConfig {
    fn default() -> Self {
        Self {
            camera_height_m: 1.5,
            stride: 4,
            cell_size: 0.25,
            low_density_threshold: 50,
            max_points: 4000,
            ransac: RansacParams::default(),
            fixed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    /// Pixel stride of the back-projection used for labels and ROIs.
    pub stride: usize,
    pub cell_size: f64,
    pub bands: HeightBands,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            stride: 2,
            cell_size: 0.2,
            bands: HeightBands::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Single,
    Weighted,
    Orientation,
    Distance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: TrainMode,
    pub sigma_floor: f64,
    /// Orientation clusters.
    pub k: usize,
    /// Distance range boundaries in meters, starting at 0.
    pub ranges: Vec<f64>,
    pub seed: u64,
    pub normalize: NormalizeParams,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Weighted,
            sigma_floor: 0.01,
            k: 3,
            ranges: vec![0.0, 4.0, 7.0],
            seed: 0,
            normalize: NormalizeParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierConfig {
    pub accept_threshold: f64,
    pub training: LogisticParams,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            accept_threshold: VerifyConfig::default().accept_threshold,
            training: LogisticParams::default(),
        }
    }
}

impl VerifierConfig {
    pub fn verify(&self) -> VerifyConfig {
        VerifyConfig {
            accept_threshold: self.accept_threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub overlap: f64,
    /// Upper fppi bound of the summary area.
    pub max_fppi: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            overlap: 0.5,
            max_fppi: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub plane: PlaneConfig,
    pub labeling: LabelingConfig,
    pub roi: RoiConfig,
    pub training: TrainingConfig,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
    pub verifier: VerifierConfig,
    pub evaluation: EvaluationConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let p = &self.plane;
        if !(p.camera_height_m > 0.0) || p.stride == 0 || !(p.cell_size > 0.0) || p.max_points < 3 {
            return bad(format!("invalid plane settings: {p:?}"));
        }
        if p.ransac.iterations == 0 || !(p.ransac.inlier_threshold > 0.0) {
            return bad("ransac needs iterations > 0 and a positive inlier threshold".into());
        }
        if self.labeling.stride == 0 || !(self.labeling.cell_size > 0.0) {
            return bad("labeling needs stride >= 1 and a positive cell size".into());
        }
        self.labeling.bands.validate().map_err(Error::Config)?;
        if !(self.roi.cell_size > 0.0) {
            return bad("roi cell size must be positive".into());
        }
        let t = &self.training;
        if !(t.sigma_floor > 0.0) || t.k == 0 {
            return bad("training needs sigma_floor > 0 and k >= 1".into());
        }
        crate::template::ranges_from_boundaries(&t.ranges).map_err(|e| Error::Config(e.to_string()))?;
        self.matching.validate()?;
        let a = self.verifier.accept_threshold;
        if !(0.0..=1.0).contains(&a) {
            return bad(format!("accept_threshold {a} outside [0, 1]"));
        }
        let e = &self.evaluation;
        if !(0.0..=1.0).contains(&e.overlap) || !(e.max_fppi > 0.0) {
            return bad("evaluation needs overlap in [0, 1] and max_fppi > 0".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub plane_ms: f64,
    pub roi_ms: f64,
    pub detector_ms: f64,
    pub verifier_ms: f64,
}

impl StageTimes {
    pub fn total_ms(&self) -> f64 {
        self.plane_ms + self.roi_ms + self.detector_ms + self.verifier_ms
    }

    pub fn depth_only_ms(&self) -> f64 {
        self.plane_ms + self.roi_ms + self.detector_ms
    }

    pub fn add(&mut self, other: &StageTimes) {
        self.plane_ms += other.plane_ms;
        self.roi_ms += other.roi_ms;
        self.detector_ms += other.detector_ms;
        self.verifier_ms += other.verifier_ms;
    }

    pub fn scaled(&self, factor: f64) -> StageTimes {
        StageTimes {
            plane_ms: self.plane_ms * factor,
            roi_ms: self.roi_ms * factor,
            detector_ms: self.detector_ms * factor,
            verifier_ms: self.verifier_ms * factor,
        }
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Ground plane from low-density cells of a rough-plane occupancy map.
pub fn estimate_plane(frame: &DepthFrame, cfg: &PlaneConfig) -> Result<GroundPlane> {
    if let Some(f) = cfg.fixed {
        return GroundPlane::new(Point3::new(f.normal[0], f.normal[1], f.normal[2]), f.offset);
    }
    let cloud = backproject_strided(frame, cfg.stride);
    let rough = GroundPlane::from_camera_height(cfg.camera_height_m);
    let grid = build_occupancy(&cloud, &rough, cfg.cell_size);
    let candidates = select_low_density(&grid, cfg.low_density_threshold);
    let step = candidates.len().div_ceil(cfg.max_points).max(1);
    let points: Vec<Point3> = candidates.iter().step_by(step).map(|&i| cloud.points[i]).collect();
    Ok(fit_plane_ransac(&points, &cfg.ransac)?.plane)
}

/// Structure labels and object ROIs for a frame given its ground plane.
pub fn find_rois(frame: &DepthFrame, plane: &GroundPlane, cfg: &PipelineConfig) -> Vec<Roi> {
    let cloud = backproject_strided(frame, cfg.labeling.stride);
    let labeled = label_structure(cloud, plane, cfg.labeling.cell_size, &cfg.labeling.bands);
    extract_rois(&labeled, plane, &cfg.roi, frame.width(), frame.height())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub plane: GroundPlane,
    pub rois: Vec<Roi>,
    pub detections: Vec<Detection>,
    pub times: StageTimes,
}

/// Plane, ROIs and depth detections for one frame.
pub fn run_depth(frame: &DepthFrame, set: &TemplateSet, cfg: &PipelineConfig) -> Result<FrameResult> {
    let t = Instant::now();
    let plane = estimate_plane(frame, &cfg.plane)?;
    let plane_ms = elapsed_ms(t);
    let t = Instant::now();
    let rois = find_rois(frame, &plane, cfg);
    let roi_ms = elapsed_ms(t);
    let t = Instant::now();
    let detections = detector::detect(frame, &rois, set, &cfg.matching);
    let detector_ms = elapsed_ms(t);
    Ok(FrameResult {
        plane,
        rois,
        detections,
        times: StageTimes {
            plane_ms,
            roi_ms,
            detector_ms,
            verifier_ms: 0.0,
        },
    })
}

/// Depth pipeline followed by verification of unreliable detections.
pub fn run_full(
    frame: &DepthFrame,
    set: &TemplateSet,
    scorer: &dyn AppearanceScorer,
    cfg: &PipelineConfig,
) -> Result<FrameResult> {
    let mut result = run_depth(frame, set, cfg)?;
    let t = Instant::now();
    result.detections = apply_verifier(std::mem::take(&mut result.detections), frame, scorer, &cfg.verifier.verify())?;
    result.times.verifier_ms = elapsed_ms(t);
    Ok(result)
}

/// Average per-stage times over `frames` after `warmup` untimed frames.
/// Runs on the calling thread only.
pub fn time_pipeline(
    frames: &[DepthFrame],
    set: &TemplateSet,
    scorer: Option<&dyn AppearanceScorer>,
    cfg: &PipelineConfig,
    warmup: usize,
) -> Result<StageTimes> {
    if frames.len() <= warmup {
        return Err(Error::InvalidInput(format!("need more than {warmup} frames to time")));
    }
    let mut total = StageTimes::default();
    for (i, frame) in frames.iter().enumerate() {
        let r = match scorer {
            Some(s) => run_full(frame, set, s, cfg)?,
            None => run_depth(frame, set, cfg)?,
        };
        if i >= warmup {
            total.add(&r.times);
        }
    }
    Ok(total.scaled(1.0 / (frames.len() - warmup) as f64))
}

/// Trains the template set selected by `cfg.mode`.
pub fn train_templates(samples: &[Annotation], cfg: &TrainingConfig) -> Result<TemplateSet> {
    let floor = Some(cfg.sigma_floor);
    match cfg.mode {
        TrainMode::Single => train_orientation_set(samples, 1, cfg.seed, None),
        TrainMode::Weighted => train_orientation_set(samples, 1, cfg.seed, floor),
        TrainMode::Orientation => train_orientation_set(samples, cfg.k, cfg.seed, floor),
        TrainMode::Distance => train_distance_set(samples, &ranges_from_boundaries(&cfg.ranges)?, floor),
    }
}

/// Depth detections of every frame keyed by frame id.
pub fn detect_frames(
    frames: &[DepthFrame],
    set: &TemplateSet,
    cfg: &PipelineConfig,
    workers: usize,
) -> Result<BTreeMap<u64, Vec<Detection>>> {
    parallel_map(frames, workers, |f| run_depth(f, set, cfg).map(|r| (f.frame_id, r.detections)))
        .into_iter()
        .collect()
}

/// One curve per soft threshold. Depth detection runs once; every
/// detection below the largest threshold is verified once and the verdict
/// reused. Detections at or above a threshold are reliable for it, the rest
/// survive only if the verifier accepts them.
pub fn sweep_soft_threshold(
    frames: &[DepthFrame],
    gt: &GroundTruthSet,
    set: &TemplateSet,
    scorer: &dyn AppearanceScorer,
    cfg: &PipelineConfig,
    th_values: &[f64],
    workers: usize,
) -> Result<Vec<(f64, EvalCurve)>> {
    let th_hard = cfg.matching.th_hard;
    if let Some(t) = th_values.iter().find(|&&t| !(t >= th_hard && t <= 1.0)) {
        return Err(Error::Config(format!("soft threshold {t} outside [{th_hard}, 1]")));
    }
    let top = th_values.iter().copied().fold(th_hard, f64::max);
    let verify_cfg = cfg.verifier.verify();
    let per_frame = parallel_map(frames, workers, |f| -> Result<(u64, Vec<(Detection, bool)>)> {
        let dets = run_depth(f, set, cfg)?.detections;
        let judged = dets
            .into_iter()
            .map(|mut d| {
                let accepted = if d.score < top {
                    let v = verify(&d, f, scorer, &verify_cfg)?;
                    d.verified_score = Some(v.verified_score);
                    v.accepted
                } else {
                    false
                };
                Ok((d, accepted))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((f.frame_id, judged))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    th_values
        .iter()
        .map(|&th| {
            let dets: BTreeMap<u64, Vec<Detection>> = per_frame
                .iter()
                .map(|(id, judged)| {
                    let kept = judged
                        .iter()
                        .filter(|(d, accepted)| d.score >= th || *accepted)
                        .map(|(d, _)| {
                            let mut d = d.clone();
                            if d.score >= th {
                                d.band = Band::Reliable;
                                d.verified_score = None;
                            } else {
                                d.band = Band::Unreliable;
                            }
                            d
                        })
                        .collect();
                    (*id, kept)
                })
                .collect();
            Ok((th, evaluate(&dets, gt, cfg.evaluation.overlap)?))
        })
        .collect()
}

/// Maps `f` over `items` on up to `workers` threads, preserving order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults_and_rejects_unknown_keys() {
        let cfg = PipelineConfig::from_toml_str("[match]\nth_soft = 0.7\n").unwrap();
        assert_eq!(cfg.matching.th_soft, 0.7);
        assert_eq!(cfg.matching.th_hard, 0.3);
        assert!(matches!(PipelineConfig::from_toml_str("[match]\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("[match]\nth_soft = 0.1\n"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("[verifier]\nbogus = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn stage_times_add_up() {
        let t = StageTimes {
            plane_ms: 1.0,
            roi_ms: 2.0,
            detector_ms: 3.0,
            verifier_ms: 4.0,
        };
        assert_eq!(t.total_ms(), 10.0);
        assert_eq!(t.depth_only_ms(), 6.0);
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u32> = (0..37).collect();
        let out = parallel_map(&items, 4, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
