//! Object segmentation on the ground plane and image-plane ROI boxes.

use serde::{Deserialize, Serialize};

use crate::geometry::{GroundPlane, PointCloud};
use crate::grid::Rect;
use crate::labeling::{build_occupancy_filtered, LabeledCloud, OccupancyGrid, StructureLabel};

/// A segmented object hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Roi {
    pub bbox: Rect,
    pub point_indices: Vec<usize>,
    /// Median camera depth of the member points.
    pub distance_m: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    pub cell_size: f64,
    pub min_points: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            cell_size: 0.2,
            min_points: 50,
        }
    }
}

/// Ground-plane histogram of the `Object` points only. Bin members index into
/// `labeled.cloud`.
pub fn roi_histogram(labeled: &LabeledCloud, plane: &GroundPlane, cell_size: f64) -> OccupancyGrid {
    build_occupancy_filtered(&labeled.cloud, plane, cell_size, |i| {
        labeled.labels[i] == StructureLabel::Object
    })
}

/// Maximal 8-connected sets of nonempty cells (flat cell indices, ascending),
/// dropping components with fewer than `min_points` points. Sorted by
/// descending point count, ties broken by the smallest cell index.
pub fn connected_components(grid: &OccupancyGrid, min_points: usize) -> Vec<Vec<usize>> {
    let rows = grid.rows();
    let cols = grid.cols();
    let counts = grid.counts.as_slice();
    let mut visited = vec![false; counts.len()];
    let mut stack = Vec::new();
    let mut out: Vec<(usize, Vec<usize>)> = Vec::new();

    for seed in 0..counts.len() {
        if visited[seed] || counts[seed] == 0 {
            continue;
        }
        visited[seed] = true;
        stack.push(seed);
        let mut cells = Vec::new();
        let mut total = 0usize;
        while let Some(cell) = stack.pop() {
            cells.push(cell);
            total += counts[cell] as usize;
            let (r, c) = ((cell / cols) as i64, (cell % cols) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                        continue;
                    }
                    let n = nr as usize * cols + nc as usize;
                    if !visited[n] && counts[n] > 0 {
                        visited[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        if total >= min_points {
            cells.sort_unstable();
            out.push((total, cells));
        }
    }
    out.sort_by(|a, b| b.0.cmp(&a.0).then(a.1[0].cmp(&b.1[0])));
    out.into_iter().map(|(_, cells)| cells).collect()
}

/// Median of a nonempty list (mean of the middle pair for even lengths).
pub(crate) fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    let n = values.len();
    let (_, &mut hi, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = values[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Pixel hull and median depth of the points inside `component`, clipped to
/// a `width` x `height` image.
pub fn back_project_bbox(
    component: &[usize],
    grid: &OccupancyGrid,
    cloud: &PointCloud,
    width: usize,
    height: usize,
) -> Roi {
    let mut point_indices: Vec<usize> = component
        .iter()
        .flat_map(|&cell| grid.bin(cell).iter().map(|&i| i as usize))
        .collect();
    point_indices.sort_unstable();
    assert!(!point_indices.is_empty(), "component must hold points");

    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    let mut depths = Vec::with_capacity(point_indices.len());
    for &i in &point_indices {
        let (u, v) = cloud.pixels[i];
        x0 = x0.min(u as i64);
        y0 = y0.min(v as i64);
        x1 = x1.max(u as i64);
        y1 = y1.max(v as i64);
        depths.push(cloud.points[i].z);
    }
    Roi {
        bbox: Rect::from_corners_inclusive(x0, y0, x1, y1).clip(width, height),
        point_indices,
        distance_m: median(&mut depths),
    }
}

/// Histogram, components and boxes in one pass.
pub fn extract_rois(
    labeled: &LabeledCloud,
    plane: &GroundPlane,
    cfg: &RoiConfig,
    width: usize,
    height: usize,
) -> Vec<Roi> {
    let grid = roi_histogram(labeled, plane, cfg.cell_size);
    connected_components(&grid, cfg.min_points)
        .iter()
        .map(|component| back_project_bbox(component, &grid, &labeled.cloud, width, height))
        .filter(|roi| !roi.bbox.is_empty() && roi.distance_m > 0.0)
        .collect()
}
