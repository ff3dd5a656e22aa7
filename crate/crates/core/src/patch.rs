//! Helpers shared by annotation normalization and detection windows:
//! nearest-neighbour resampling and central-median depth normalization.

use crate::grid::Grid;

/// Side of the square templates and annotations.
pub const TEMPLATE_SIZE: usize = 150;
/// Side of the central reference patch used for median normalization and
/// for the annotation distance.
pub const REFERENCE_SIZE: usize = 30;

/// Source index sampled by output index `i` when resampling `src` cells onto
/// `dst` cells with nearest-neighbour, pixel-center alignment.
#[inline]
pub fn nearest_source(i: usize, dst: usize, src: usize) -> usize {
    (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)
}

pub fn resize_nearest<T: Clone>(src: &Grid<T>, rows: usize, cols: usize) -> Grid<T> {
    assert!(src.rows() > 0 && src.cols() > 0, "cannot resize an empty grid");
    let col_map: Vec<usize> = (0..cols).map(|c| nearest_source(c, cols, src.cols())).collect();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = src.row(nearest_source(r, rows, src.rows()));
        data.extend(col_map.iter().map(|&c| row[c].clone()));
    }
    Grid::from_vec(rows, cols, data).expect("shape")
}

/// Row and column ranges of the centered `size` x `size` reference patch
/// (clipped to the grid).
pub fn reference_window(rows: usize, cols: usize, size: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let span = |n: usize| {
        let s = size.min(n);
        let start = (n - s) / 2;
        start..start + s
    };
    (span(rows), span(cols))
}

/// Median of the valid values inside the reference patch, together with the
/// fraction of the patch that was valid. `None` when nothing is valid.
pub fn reference_median(values: &Grid<f64>, valid: &Grid<bool>, size: usize) -> Option<(f64, f64)> {
    let (rows, cols) = reference_window(values.rows(), values.cols(), size);
    let total = rows.len() * cols.len();
    let mut vals = Vec::with_capacity(total);
    for r in rows {
        for c in cols.clone() {
            if valid[(r, c)] {
                vals.push(values[(r, c)]);
            }
        }
    }
    if vals.is_empty() {
        return None;
    }
    let fraction = vals.len() as f64 / total as f64;
    Some((crate::roi::median(&mut vals), fraction))
}

/// Subtracts `median` from every valid value and clamps the result to
/// `[-clip, clip]`. Invalid cells are set to 0.
pub fn subtract_and_clip(values: &mut Grid<f64>, valid: &Grid<bool>, median: f64, clip: f64) {
    for (v, &ok) in values.as_mut_slice().iter_mut().zip(valid.iter()) {
        *v = if ok { (*v - median).clamp(-clip, clip) } else { 0.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_at_same_size() {
        let g = Grid::from_fn(7, 5, |r, c| r * 5 + c);
        assert_eq!(resize_nearest(&g, 7, 5), g);
    }

    #[test]
    fn resize_halves() {
        let g = Grid::from_fn(4, 4, |r, c| (r, c));
        let h = resize_nearest(&g, 2, 2);
        assert_eq!(h.as_slice(), &[(1, 1), (1, 3), (3, 1), (3, 3)]);
    }

    #[test]
    fn reference_window_centered() {
        let (r, c) = reference_window(150, 150, 30);
        assert_eq!((r.start, r.end, c.start, c.end), (60, 90, 60, 90));
        let (_, c) = reference_window(150, 20, 30);
        assert_eq!(c, 0..20);
    }

    #[test]
    fn median_ignores_invalid() {
        let values = Grid::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
        let mut valid = Grid::filled(4, 4, true);
        valid[(1, 1)] = false;
        let (m, f) = reference_median(&values, &valid, 2).unwrap();
        // patch {5, 6, 9, 10} minus 5
        assert_eq!(m, 9.0);
        assert_eq!(f, 0.75);
    }
}
