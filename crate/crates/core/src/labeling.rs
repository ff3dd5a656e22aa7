//! Ground-plane occupancy maps and per-cell height-histogram structure
//! labeling.
//!
//! Points are projected into the plane's 2D coordinates (see
//! [`GroundPlane::basis`]) and binned on a lattice anchored at the plane
//! origin, so cell boundaries do not depend on the extent of the cloud.

use serde::{Deserialize, Serialize};

use crate::geometry::{height_above_plane, GroundPlane, Point3, PointCloud};
use crate::grid::Grid;

/// 2D histogram of points over ground-plane cells, with the member indices
/// of every cell kept in compressed (CSR) form.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub cell_size: f64,
    /// Plane coordinates of the corner of cell `(0, 0)`.
    pub origin: [f64; 2],
    /// Rows run along the second plane axis (forward), columns along the
    /// first (camera right).
    pub counts: Grid<u32>,
    offsets: Vec<u32>,
    members: Vec<u32>,
}

impl OccupancyGrid {
    fn empty(cell_size: f64) -> Self {
        Self {
            cell_size,
            origin: [0.0, 0.0],
            counts: Grid::filled(0, 0, 0),
            offsets: vec![0],
            members: Vec::new(),
        }
    }

    /// Builds a grid from precomputed integer cell coordinates (`None` skips
    /// the point).
    pub(crate) fn from_cells(cell_size: f64, cells: &[Option<(i64, i64)>]) -> Self {
        let mut lo = (i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN);
        for &(r, c) in cells.iter().flatten() {
            lo = (lo.0.min(r), lo.1.min(c));
            hi = (hi.0.max(r), hi.1.max(c));
        }
        if lo.0 > hi.0 {
            return Self::empty(cell_size);
        }
        let rows = (hi.0 - lo.0 + 1) as usize;
        let cols = (hi.1 - lo.1 + 1) as usize;
        let flat: Vec<Option<usize>> = cells
            .iter()
            .map(|cell| cell.map(|(r, c)| (r - lo.0) as usize * cols + (c - lo.1) as usize))
            .collect();

        let mut counts = vec![0u32; rows * cols];
        for &idx in flat.iter().flatten() {
            counts[idx] += 1;
        }
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        offsets.push(0u32);
        for &n in &counts {
            offsets.push(offsets.last().unwrap() + n);
        }
        let mut cursor: Vec<u32> = offsets[..counts.len()].to_vec();
        let mut members = vec![0u32; *offsets.last().unwrap() as usize];
        for (point, idx) in flat.iter().enumerate() {
            if let Some(idx) = *idx {
                members[cursor[idx] as usize] = point as u32;
                cursor[idx] += 1;
            }
        }
        Self {
            cell_size,
            origin: [lo.1 as f64 * cell_size, lo.0 as f64 * cell_size],
            counts: Grid::from_vec(rows, cols, counts).expect("shape"),
            offsets,
            members,
        }
    }

    pub fn rows(&self) -> usize {
        self.counts.rows()
    }

    pub fn cols(&self) -> usize {
        self.counts.cols()
    }

    pub fn n_cells(&self) -> usize {
        self.counts.len()
    }

    /// Point indices falling in the flat cell index `cell`.
    pub fn bin(&self, cell: usize) -> &[u32] {
        &self.members[self.offsets[cell] as usize..self.offsets[cell + 1] as usize]
    }

    pub fn total(&self) -> usize {
        self.members.len()
    }
}

/// Integer ground-lattice cell of `p` (row along the forward axis, column
/// along the lateral axis).
fn plane_cell(p: &Point3, e1: &Point3, e2: &Point3, cell_size: f64) -> (i64, i64) {
    let a = p.dot(e1) / cell_size;
    let b = p.dot(e2) / cell_size;
    (b.floor() as i64, a.floor() as i64)
}

pub fn build_occupancy(cloud: &PointCloud, plane: &GroundPlane, cell_size: f64) -> OccupancyGrid {
    build_occupancy_filtered(cloud, plane, cell_size, |_| true)
}

/// Occupancy over the points accepted by `keep` (by point index).
pub fn build_occupancy_filtered(
    cloud: &PointCloud,
    plane: &GroundPlane,
    cell_size: f64,
    mut keep: impl FnMut(usize) -> bool,
) -> OccupancyGrid {
    assert!(cell_size > 0.0, "cell_size must be positive");
    let (e1, e2) = plane.basis();
    let cells: Vec<Option<(i64, i64)>> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| keep(i).then(|| plane_cell(p, &e1, &e2, cell_size)))
        .collect();
    OccupancyGrid::from_cells(cell_size, &cells)
}

/// Indices of all points in cells holding at most `density_threshold` points,
/// in ascending order.
pub fn select_low_density(grid: &OccupancyGrid, density_threshold: u32) -> Vec<usize> {
    let mut out: Vec<usize> = grid
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0 && n <= density_threshold)
        .flat_map(|(cell, _)| grid.bin(cell).iter().map(|&i| i as usize))
        .collect();
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StructureLabel {
    GroundPlane,
    Object,
    FreeSpace,
    ElevatedStructure,
}

impl StructureLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            StructureLabel::GroundPlane => "ground",
            StructureLabel::Object => "object",
            StructureLabel::FreeSpace => "free_space",
            StructureLabel::ElevatedStructure => "elevated",
        }
    }
}

/// Height band boundaries (meters above the plane) and the free-space rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeightBands {
    pub ground_bottom: f64,
    pub ground_top: f64,
    pub object_top: f64,
    pub free_top: f64,
    /// A cell is elevated only if its free-space band holds less than this
    /// fraction of the cell's points.
    pub max_free_fraction: f64,
    /// ...and its object band holds less than this fraction.
    pub max_object_fraction: f64,
}

impl Default for HeightBands {
    fn default() -> Self {
        Self {
            ground_bottom: -0.2,
            ground_top: 0.2,
            object_top: 2.0,
            free_top: 2.8,
            max_free_fraction: 0.05,
            max_object_fraction: 0.10,
        }
    }
}

impl HeightBands {
    pub fn validate(&self) -> Result<(), String> {
        let ordered = self.ground_bottom < self.ground_top
            && self.ground_top < self.object_top
            && self.object_top < self.free_top;
        let fractions = (0.0..=1.0).contains(&self.max_free_fraction)
            && (0.0..=1.0).contains(&self.max_object_fraction);
        if ordered && fractions {
            Ok(())
        } else {
            Err(format!("invalid height bands {self:?}"))
        }
    }

    /// Histogram bin of a height: 0 ground, 1 object, 2 free space, 3 elevated.
    /// Heights below the ground band count as ground.
    #[inline]
    pub fn band(&self, height: f64) -> usize {
        if height < self.ground_top {
            0
        } else if height < self.object_top {
            1
        } else if height < self.free_top {
            2
        } else {
            3
        }
    }

    /// Applies the free-space rule to one cell's 4-bin histogram.
    pub fn is_elevated(&self, hist: &[u32; 4]) -> bool {
        let total: u32 = hist.iter().sum();
        if total == 0 || hist[3] == 0 {
            return false;
        }
        let t = total as f64;
        (hist[2] as f64) < self.max_free_fraction * t && (hist[1] as f64) < self.max_object_fraction * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub labels: Vec<StructureLabel>,
}

impl LabeledCloud {
    pub fn count(&self, label: StructureLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn indices_of(&self, label: StructureLabel) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Labels every point from the height histogram of its ground cell.
///
/// Points in elevated cells are `ElevatedStructure` unless they sit in the
/// ground band. Elsewhere each point takes the label of its own band.
pub fn label_structure(
    cloud: PointCloud,
    plane: &GroundPlane,
    grid_cell: f64,
    bands: &HeightBands,
) -> LabeledCloud {
    let grid = build_occupancy(&cloud, plane, grid_cell);
    let point_band: Vec<u8> = cloud
        .points
        .iter()
        .map(|p| bands.band(height_above_plane(p, plane)) as u8)
        .collect();
    let mut labels = vec![StructureLabel::GroundPlane; cloud.len()];
    for cell in 0..grid.n_cells() {
        let members = grid.bin(cell);
        if members.is_empty() {
            continue;
        }
        let mut hist = [0u32; 4];
        for &i in members {
            hist[point_band[i as usize] as usize] += 1;
        }
        let elevated = bands.is_elevated(&hist);
        for &i in members {
            let i = i as usize;
            labels[i] = match (point_band[i], elevated) {
                (0, _) => StructureLabel::GroundPlane,
                (_, true) => StructureLabel::ElevatedStructure,
                (1, false) => StructureLabel::Object,
                (2, false) => StructureLabel::FreeSpace,
                _ => StructureLabel::ElevatedStructure,
            };
        }
    }
    LabeledCloud { cloud, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn level() -> GroundPlane {
        GroundPlane::from_camera_height(1.5)
    }

    /// Camera-frame point at lateral `x`, forward `z` and `h` meters above
    /// the level plane 1.5 m below the camera.
    fn at(x: f64, z: f64, h: f64) -> Point3 {
        Point3::new(x, 1.5 - h, z)
    }

    fn cloud_of(points: Vec<Point3>) -> PointCloud {
        let pixels = (0..points.len() as u32).map(|i| (i, 0)).collect();
        PointCloud { points, pixels }
    }

    #[test]
    fn empty_cloud_has_zero_counts() {
        let g = build_occupancy(&PointCloud::default(), &level(), 0.2);
        assert!(g.counts.iter().all(|&c| c == 0));
        assert_eq!(g.total(), 0);
    }

    #[test]
    fn points_in_one_cell() {
        let pts = (0..10).map(|i| at(0.05 + 0.01 * i as f64, 3.05, 0.1 * i as f64)).collect();
        let g = build_occupancy(&cloud_of(pts), &level(), 0.2);
        assert_eq!(g.n_cells(), 1);
        assert_eq!(g.counts.as_slice(), &[10]);
        assert_eq!(g.bin(0).len(), 10);
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cloud_of(
            (0..n)
                .map(|_| {
                    at(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(1.0..4.0),
                        rng.random_range(-0.1..3.5),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn counts_match_direct_tally() {
        let cloud = random_cloud(4, 2000);
        let plane = level();
        let g = build_occupancy(&cloud, &plane, 0.25);
        assert_eq!(g.counts.iter().map(|&c| c as usize).sum::<usize>(), cloud.len());
        let (e1, e2) = plane.basis();
        let mut seen = vec![false; cloud.len()];
        for cell in 0..g.n_cells() {
            assert_eq!(g.bin(cell).len() as u32, g.counts.as_slice()[cell]);
            let (r, c) = (cell / g.cols(), cell % g.cols());
            for &i in g.bin(cell) {
                let p = &cloud.points[i as usize];
                let a = p.dot(&e1) - g.origin[0];
                let b = p.dot(&e2) - g.origin[1];
                assert_eq!((b / 0.25).floor() as usize, r);
                assert_eq!((a / 0.25).floor() as usize, c);
                assert!(!seen[i as usize]);
                seen[i as usize] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn low_density_threshold_zero_selects_nothing() {
        let g = build_occupancy(&random_cloud(1, 300), &level(), 0.2);
        assert!(select_low_density(&g, 0).is_empty());
    }

    #[test]
    fn low_density_selects_sparse_cell() {
        let mut pts: Vec<_> = (0..8).map(|i| at(0.1, 3.1, 0.2 * i as f64)).collect();
        pts.push(at(1.1, 3.1, 0.0));
        pts.push(at(1.12, 3.12, 0.0));
        let g = build_occupancy(&cloud_of(pts), &level(), 0.2);
        assert_eq!(select_low_density(&g, 3), vec![8, 9]);
    }

    #[test]
    fn low_density_matches_per_cell_scan() {
        let cloud = random_cloud(8, 3000);
        let g = build_occupancy(&cloud, &level(), 0.2);
        for threshold in [1, 3, 7, 15] {
            let (e1, e2) = level().basis();
            let key = |p: &Point3| plane_cell(p, &e1, &e2, 0.2);
            let mut expected = Vec::new();
            for (i, p) in cloud.points.iter().enumerate() {
                let n = cloud.points.iter().filter(|q| key(q) == key(p)).count();
                if n <= threshold as usize {
                    expected.push(i);
                }
            }
            assert_eq!(select_low_density(&g, threshold), expected);
        }
    }

    #[test]
    fn low_points_are_ground() {
        let pts = (0..50).map(|i| at(0.02 * i as f64, 2.0, 0.1)).collect();
        let labeled = label_structure(cloud_of(pts), &level(), 0.2, &HeightBands::default());
        assert_eq!(labeled.count(StructureLabel::GroundPlane), 50);
    }

    #[test]
    fn person_column_is_object() {
        let pts = (0..80).map(|i| at(0.05, 3.05, 0.3 + 0.02 * i as f64)).collect();
        let labeled = label_structure(cloud_of(pts), &level(), 0.2, &HeightBands::default());
        assert_eq!(labeled.count(StructureLabel::Object), 80);
    }

    #[test]
    fn hanging_mass_is_elevated() {
        let bands = HeightBands::default();
        let mut pts: Vec<_> = (0..40).map(|i| at(0.05, 3.05, 2.8 + 0.0175 * i as f64)).collect();
        pts.extend((0..20).map(|i| at(0.01 * i as f64, 3.1, 0.0)));
        let labeled = label_structure(cloud_of(pts.clone()), &level(), 0.2, &bands);

        // explicit 4-bin histogram of the single cell
        let mut hist = [0u32; 4];
        for p in &pts {
            let h = height_above_plane(p, &level());
            let bin = if h < 0.2 {
                0
            } else if h < 2.0 {
                1
            } else if h < 2.8 {
                2
            } else {
                3
            };
            hist[bin] += 1;
        }
        assert_eq!(hist, [20, 0, 0, 40]);
        assert!(bands.is_elevated(&hist));
        assert_eq!(labeled.count(StructureLabel::ElevatedStructure), 40);
        assert_eq!(labeled.count(StructureLabel::GroundPlane), 20);
    }

    #[test]
    fn pedestrian_under_canopy_stays_object() {
        let mut pts: Vec<_> = (0..80).map(|i| at(0.05, 3.05, 0.3 + 0.02 * i as f64)).collect();
        pts.extend((0..10).map(|i| at(0.05, 3.05, 3.0 + 0.01 * i as f64)));
        let labeled = label_structure(cloud_of(pts), &level(), 0.2, &HeightBands::default());
        assert_eq!(labeled.count(StructureLabel::Object), 80);
        assert_eq!(labeled.count(StructureLabel::ElevatedStructure), 10);
    }

    #[test]
    fn every_point_gets_one_label_and_translation_preserves_labels() {
        let cloud = random_cloud(12, 1500);
        let plane = level();
        let bands = HeightBands::default();
        let a = label_structure(cloud.clone(), &plane, 0.2, &bands);
        assert_eq!(a.labels.len(), cloud.len());

        let (e1, e2) = plane.basis();
        let shift = e1 * (0.2 * 7.0) + e2 * (0.2 * 3.0);
        let moved = cloud_of(cloud.points.iter().map(|p| p + shift).collect());
        let b = label_structure(moved, &plane, 0.2, &bands);
        let differing = a.labels.iter().zip(&b.labels).filter(|(x, y)| x != y).count();
        // only points within rounding distance of a cell boundary may move
        assert!(differing <= 2, "{differing} labels changed");
    }

    #[test]
    fn removing_elevated_never_creates_elevated_objects() {
        let cloud = random_cloud(13, 2000);
        let plane = level();
        let bands = HeightBands::default();
        let first = label_structure(cloud.clone(), &plane, 0.2, &bands);
        let keep: Vec<usize> = (0..cloud.len())
            .filter(|&i| first.labels[i] != StructureLabel::ElevatedStructure)
            .collect();
        let second = label_structure(cloud.subset(&keep), &plane, 0.2, &bands);
        for (j, &i) in keep.iter().enumerate() {
            if first.labels[i] == StructureLabel::Object {
                assert_ne!(second.labels[j], StructureLabel::ElevatedStructure);
            }
        }
    }
}
