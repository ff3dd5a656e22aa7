//! Pinhole camera model, depth back-projection and RANSAC ground-plane
//! estimation.
//!
//! Camera coordinates follow the usual image convention: `x` to the right,
//! `y` down, `z` along the optical axis. A pixel `(u, v)` (column, row) with
//! depth `z` back-projects to `((u - cx) z / fx, (v - cy) z / fy, z)`.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub type Point3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64
            && self.fx.is_finite()
            && self.fy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Perspective projection of a camera-frame point to `(u, v)` pixel
    /// coordinates. `None` for points at or behind the camera.
    pub fn project(&self, p: &Point3) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Camera-frame point seen at pixel `(u, v)` with depth `z`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Point3 {
        Point3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }
}

/// A registered depth map (meters, `None` where invalid) with optional color.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub depth: Grid<Option<f32>>,
    pub rgb: Option<Grid<[u8; 3]>>,
    pub intrinsics: CameraIntrinsics,
    pub frame_id: u64,
}

impl DepthFrame {
    pub fn new(
        depth: Grid<Option<f32>>,
        rgb: Option<Grid<[u8; 3]>>,
        intrinsics: CameraIntrinsics,
        frame_id: u64,
    ) -> Result<Self> {
        let frame = Self {
            depth,
            rgb,
            intrinsics,
            frame_id,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.depth.rows() != self.intrinsics.height || self.depth.cols() != self.intrinsics.width {
            return Err(Error::InvalidInput(format!(
                "depth is {}x{} but intrinsics say {}x{}",
                self.depth.cols(),
                self.depth.rows(),
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        if let Some(bad) = self
            .depth
            .iter()
            .flatten()
            .find(|z| !(z.is_finite() && **z > 0.0))
        {
            return Err(Error::InvalidInput(format!("invalid depth value {bad}")));
        }
        if let Some(rgb) = &self.rgb {
            if !rgb.same_shape(&self.depth) {
                return Err(Error::InvalidInput("rgb and depth dimensions differ".into()));
            }
        }
        Ok(())
    }

    /// Builds a frame from sensor-style storage where 0 marks an invalid cell.
    pub fn from_raw_meters(
        raw: &Grid<f32>,
        rgb: Option<Grid<[u8; 3]>>,
        intrinsics: CameraIntrinsics,
        frame_id: u64,
    ) -> Result<Self> {
        let depth = raw.map(|&z| (z > 0.0 && z.is_finite()).then_some(z));
        Self::new(depth, rgb, intrinsics, frame_id)
    }

    pub fn width(&self) -> usize {
        self.depth.cols()
    }

    pub fn height(&self) -> usize {
        self.depth.rows()
    }
}

/// Back-projected points with the pixel each one came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    /// `(u, v)` = (column, row) of the source pixel.
    pub pixels: Vec<(u32, u32)>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            pixels: indices.iter().map(|&i| self.pixels[i]).collect(),
        }
    }
}

/// One point per valid depth pixel.
pub fn backproject(frame: &DepthFrame) -> PointCloud {
    backproject_strided(frame, 1)
}

/// Back-projects every `stride`-th pixel in both directions.
pub fn backproject_strided(frame: &DepthFrame, stride: usize) -> PointCloud {
    let stride = stride.max(1);
    let k = &frame.intrinsics;
    let mut cloud = PointCloud::default();
    for v in (0..frame.height()).step_by(stride) {
        let row = frame.depth.row(v);
        for u in (0..frame.width()).step_by(stride) {
            if let Some(z) = row[u] {
                cloud.points.push(k.unproject(u as f64, v as f64, z as f64));
                cloud.pixels.push((u as u32, v as u32));
            }
        }
    }
    cloud
}

/// Plane `normal · p = offset`, with `normal` pointing away from the ground
/// so that points above it have positive height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl GroundPlane {
    /// Normalizes `normal` (and scales `offset` with it).
    pub fn new(normal: Point3, offset: f64) -> Result<Self> {
        let n = normal.norm();
        if !(n.is_finite() && n > 0.0 && offset.is_finite()) {
            return Err(Error::InvalidInput("plane normal must be finite and nonzero".into()));
        }
        Ok(Self {
            normal: (normal / n).into(),
            offset: offset / n,
        })
    }

    /// Level ground `camera_height` meters below the camera (image `y` down).
    pub fn from_camera_height(camera_height: f64) -> Self {
        Self {
            normal: [0.0, -1.0, 0.0],
            offset: -camera_height,
        }
    }

    #[inline]
    pub fn normal(&self) -> Point3 {
        Point3::from(self.normal)
    }

    #[inline]
    pub fn height_of(&self, p: &Point3) -> f64 {
        height_above_plane(p, self)
    }

    /// Flips the normal so the camera center lies on the positive side.
    /// Planes through the origin are oriented with "up" = image `-y`.
    fn oriented(self) -> Self {
        let flip = if self.offset.abs() > 1e-9 {
            self.offset > 0.0
        } else {
            self.normal[1] > 0.0
        };
        if flip {
            Self {
                normal: [-self.normal[0], -self.normal[1], -self.normal[2]],
                offset: -self.offset,
            }
        } else {
            self
        }
    }

    /// Orthonormal in-plane axes used to index ground grids. The first axis is
    /// the camera `x` axis projected into the plane.
    pub fn basis(&self) -> (Point3, Point3) {
        let n = self.normal();
        let mut e1 = Point3::x() - n * n.x;
        if e1.norm() < 1e-6 {
            e1 = Point3::z() - n * n.z;
        }
        let e1 = e1.normalize();
        let e2 = n.cross(&e1);
        (e1, e2)
    }

    /// Angle between two plane normals in degrees, ignoring orientation.
    pub fn angle_deg(&self, other: &GroundPlane) -> f64 {
        let c = self.normal().dot(&other.normal()).abs().min(1.0);
        c.acos().to_degrees()
    }
}

/// Signed height `normal · p - offset`.
#[inline]
pub fn height_above_plane(point: &Point3, plane: &GroundPlane) -> f64 {
    plane.normal[0] * point.x + plane.normal[1] * point.y + plane.normal[2] * point.z - plane.offset
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_threshold: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneFit {
    pub plane: GroundPlane,
    /// Indices (into the input slice) within `inlier_threshold` of `plane`.
    pub inliers: Vec<usize>,
}

/// RANSAC over random 3-point hypotheses, followed by one total-least-squares
/// refit on the best consensus set. Deterministic for a fixed seed.
pub fn fit_plane_ransac(points: &[Point3], params: &RansacParams) -> Result<PlaneFit> {
    let n = points.len();
    if n < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, Point3, f64)> = None;

    for _ in 0..params.iterations.max(1) {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        for taken in sorted_pair(i, j) {
            if k >= taken {
                k += 1;
            }
        }
        let Some((normal, offset)) = plane_through(&points[i], &points[j], &points[k]) else {
            continue;
        };
        let count = points
            .iter()
            .filter(|p| (normal.dot(p) - offset).abs() <= params.inlier_threshold)
            .count();
        if best.is_none_or(|(c, _, _)| count > c) {
            best = Some((count, normal, offset));
        }
    }

    let (_, normal, offset) = best.ok_or(Error::DegenerateGeometry)?;
    let hypothesis = GroundPlane { normal: normal.into(), offset };
    let consensus = inliers_of(points, &hypothesis, params.inlier_threshold);
    let plane = refit_least_squares(points, &consensus).unwrap_or(hypothesis).oriented();
    let inliers = inliers_of(points, &plane, params.inlier_threshold);
    Ok(PlaneFit { plane, inliers })
}

fn sorted_pair(a: usize, b: usize) -> [usize; 2] {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

fn plane_through(a: &Point3, b: &Point3, c: &Point3) -> Option<(Point3, f64)> {
    let ab = b - a;
    let ac = c - a;
    let cross = ab.cross(&ac);
    let norm = cross.norm();
    let scale = ab.norm() * ac.norm();
    if !(norm > 1e-9 * scale && norm > 0.0) {
        return None;
    }
    let normal = cross / norm;
    Some((normal, normal.dot(a)))
}

fn inliers_of(points: &[Point3], plane: &GroundPlane, threshold: f64) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| height_above_plane(p, plane).abs() <= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Total least squares: the plane through the centroid whose normal is the
/// eigenvector of the scatter matrix with the smallest eigenvalue.
pub fn refit_least_squares(points: &[Point3], indices: &[usize]) -> Option<GroundPlane> {
    if indices.len() < 3 {
        return None;
    }
    let inv = 1.0 / indices.len() as f64;
    let centroid = indices.iter().fold(Point3::zeros(), |acc, &i| acc + points[i]) * inv;
    let mut scatter = Matrix3::zeros();
    for &i in indices {
        let d = points[i] - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let (min_idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let normal: Point3 = eig.eigenvectors.column(min_idx).into();
    if !normal.iter().all(|v| v.is_finite()) {
        return None;
    }
    GroundPlane::new(normal, normal.dot(&centroid) / normal.norm()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).unwrap()
    }

    fn frame_with(points: &[((usize, usize), f32)]) -> DepthFrame {
        let k = intrinsics();
        let mut depth = Grid::filled(k.height, k.width, None);
        for &((u, v), z) in points {
            depth[(v, u)] = Some(z);
        }
        DepthFrame::new(depth, None, k, 0).unwrap()
    }

    #[test]
    fn intrinsics_invariants() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn principal_point_ray() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let mut depth = Grid::filled(480, 640, None);
        depth[(240, 320)] = Some(2.0);
        let cloud = backproject(&DepthFrame::new(depth, None, k, 0).unwrap());
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.points[0], Point3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn pinhole_identity() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 40.0, 200, 100).unwrap();
        let mut depth = Grid::filled(100, 200, None);
        depth[(40, 150)] = Some(3.0);
        let cloud = backproject(&DepthFrame::new(depth, None, k, 0).unwrap());
        assert_eq!(cloud.points[0], Point3::new(3.0, 0.0, 3.0));
        assert_eq!(cloud.pixels[0], (150, 40));
    }

    #[test]
    fn all_invalid_frame_is_empty() {
        assert!(backproject(&frame_with(&[])).is_empty());
    }

    #[test]
    fn frame_rejects_bad_depth() {
        let k = intrinsics();
        let mut depth = Grid::filled(k.height, k.width, None);
        depth[(0, 0)] = Some(-1.0);
        assert!(DepthFrame::new(depth, None, k, 0).is_err());
        let small = Grid::filled(10, 10, None);
        assert!(DepthFrame::new(small, None, k, 0).is_err());
    }

    #[test]
    fn reprojection_recovers_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..500)
            .map(|_| {
                (
                    (rng.random_range(0..640), rng.random_range(0..480)),
                    rng.random_range(0.3f32..20.0),
                )
            })
            .collect();
        let frame = frame_with(&pts);
        let cloud = backproject(&frame);
        for (p, &(u, v)) in cloud.points.iter().zip(&cloud.pixels) {
            let (pu, pv) = frame.intrinsics.project(p).unwrap();
            assert!((pu - u as f64).abs() < 1e-6 && (pv - v as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn height_examples() {
        let plane = GroundPlane::new(Point3::new(0.0, 1.0, 0.0), 0.0).unwrap();
        assert_eq!(height_above_plane(&Point3::new(0.0, 1.7, 4.0), &plane), 1.7);
        let tilted = GroundPlane::new(Point3::new(0.3, -1.0, 0.2), -1.4).unwrap();
        let (e1, e2) = tilted.basis();
        let on = tilted.normal() * tilted.offset + e1 * 2.5 - e2 * 7.0;
        assert!(height_above_plane(&on, &tilted).abs() < 1e-12);
    }

    #[test]
    fn height_matches_point_plane_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let plane = GroundPlane::new(n, rng.random_range(-3.0..3.0)).unwrap();
            let p = Point3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(0.0..10.0),
            );
            // foot of the perpendicular from p, computed by projection
            let anchor = plane.normal() * plane.offset;
            let along = (p - anchor).dot(&plane.normal());
            let foot = p - plane.normal() * along;
            let signed = (p - foot).norm() * along.signum();
            assert!((height_above_plane(&p, &plane) - signed).abs() < 1e-12);
        }
    }

    #[test]
    fn ransac_needs_three_points() {
        let pts = vec![Point3::zeros(), Point3::x()];
        assert!(matches!(
            fit_plane_ransac(&pts, &RansacParams::default()),
            Err(Error::InsufficientPoints { got: 2, .. })
        ));
    }

    #[test]
    fn ransac_collinear_is_degenerate() {
        let pts: Vec<_> = (0..20).map(|i| Point3::new(i as f64, 0.0, 1.0)).collect();
        assert!(matches!(
            fit_plane_ransac(&pts, &RansacParams::default()),
            Err(Error::DegenerateGeometry)
        ));
    }

    #[test]
    fn ransac_noise_free_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<_> = (0..100)
            .map(|_| Point3::new(rng.random_range(-3.0..3.0), 1.5, rng.random_range(1.0..10.0)))
            .collect();
        for thr in [1e-9, 0.05, 1.0] {
            let fit = fit_plane_ransac(
                &pts,
                &RansacParams {
                    inlier_threshold: thr,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(fit.inliers.len(), 100);
            assert!((fit.plane.normal[1].abs() - 1.0).abs() < 1e-9);
            // camera above the ground: up is -y, ground at y = 1.5
            assert!((fit.plane.normal[1] + 1.0).abs() < 1e-9);
            assert!((fit.plane.offset + 1.5).abs() < 1e-9);
        }
    }

    #[test]
    fn ransac_noisy_plane_with_outliers() {
        let truth = GroundPlane::new(Point3::new(0.05, -1.0, 0.1), -1.3).unwrap();
        let (e1, e2) = truth.basis();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut pts = Vec::new();
        for _ in 0..800 {
            let base = truth.normal() * truth.offset
                + e1 * rng.random_range(-4.0..4.0)
                + e2 * rng.random_range(1.0..12.0);
            pts.push(base + truth.normal() * noise.sample(&mut rng));
        }
        let inlier_ids: Vec<usize> = (0..pts.len()).collect();
        for _ in 0..200 {
            pts.push(Point3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-2.0..1.3),
                rng.random_range(1.0..12.0),
            ));
        }
        let fit = fit_plane_ransac(&pts, &RansacParams::default()).unwrap();
        let oracle = refit_least_squares(&pts, &inlier_ids).unwrap();
        assert!(fit.plane.angle_deg(&truth) < 1.0);
        assert!(fit.plane.angle_deg(&oracle) < 1.0);
    }

    #[test]
    fn ransac_is_deterministic_and_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts: Vec<_> = (0..300)
            .map(|_| Point3::new(rng.random_range(-3.0..3.0), 1.2, rng.random_range(1.0..8.0)))
            .collect();
        pts.extend((0..60).map(|_| {
            Point3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.0..0.5),
                rng.random_range(1.0..8.0),
            )
        }));
        let params = RansacParams {
            seed: 77,
            ..Default::default()
        };
        let a = fit_plane_ransac(&pts, &params).unwrap();
        assert_eq!(a, fit_plane_ransac(&pts, &params).unwrap());

        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 0.7);
        let t = Point3::new(1.0, -2.0, 0.5);
        let moved: Vec<_> = pts.iter().map(|p| rot * p + t).collect();
        let b = fit_plane_ransac(&moved, &params).unwrap();
        assert_eq!(a.inliers, b.inliers);
    }
}
