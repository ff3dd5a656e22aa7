//! Annotation normalization and template training.

use serde::{Deserialize, Serialize};

use crate::cluster;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::patch::{self, REFERENCE_SIZE, TEMPLATE_SIZE};
use crate::template::{DepthTemplate, DistanceRange, TemplateKind, TemplateSet, WeightedTemplate};

/// A normalized depth patch used for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    /// Depth relative to the reference median, meters. Invalid cells hold 0.
    pub patch: Grid<f64>,
    pub valid: Grid<bool>,
    pub distance_m: f64,
    pub source_id: String,
}

impl Annotation {
    /// Builds an annotation from an already-normalized patch.
    pub fn new(patch: Grid<f64>, valid: Grid<bool>, distance_m: f64, source_id: impl Into<String>) -> Result<Self> {
        if patch.is_empty() || !patch.same_shape(&valid) {
            return Err(Error::InvalidInput("annotation patch and mask must be nonempty and equal in shape".into()));
        }
        if !(distance_m > 0.0 && distance_m.is_finite()) {
            return Err(Error::InvalidInput(format!("annotation distance must be positive, got {distance_m}")));
        }
        Ok(Self {
            patch,
            valid,
            distance_m,
            source_id: source_id.into(),
        })
    }

    /// Dense annotation: every cell valid.
    pub fn dense(patch: Grid<f64>, distance_m: f64) -> Self {
        let valid = Grid::filled(patch.rows(), patch.cols(), true);
        Self::new(patch, valid, distance_m, "").expect("dense annotation")
    }

    pub fn rows(&self) -> usize {
        self.patch.rows()
    }

    pub fn cols(&self) -> usize {
        self.patch.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeParams {
    pub size: usize,
    pub reference_size: usize,
    /// Normalized depths are clamped to `[-clip, clip]` meters.
    pub clip: f64,
    pub min_reference_fraction: f64,
}

impl Default for NormalizeParams {
    fn default() -> Self {
        Self {
            size: TEMPLATE_SIZE,
            reference_size: REFERENCE_SIZE,
            clip: 1.0,
            min_reference_fraction: 0.25,
        }
    }
}

/// Resizes a raw depth patch (meters) to `size` x `size` and subtracts the
/// median of its central reference patch. The median becomes `distance_m`.
pub fn normalize_annotation(raw: &Grid<f64>, mask: &Grid<bool>, params: &NormalizeParams) -> Result<Annotation> {
    if raw.is_empty() || !raw.same_shape(mask) {
        return Err(Error::InvalidInput("raw patch and mask must be nonempty and equal in shape".into()));
    }
    let mut values = patch::resize_nearest(raw, params.size, params.size);
    let valid = patch::resize_nearest(mask, params.size, params.size);
    let median = match patch::reference_median(&values, &valid, params.reference_size) {
        Some((m, f)) if f >= params.min_reference_fraction => m,
        Some((_, f)) => return Err(Error::TooSparse { valid_fraction: f }),
        None => return Err(Error::TooSparse { valid_fraction: 0.0 }),
    };
    if median <= 0.0 {
        return Err(Error::InvalidInput("reference median depth must be positive".into()));
    }
    patch::subtract_and_clip(&mut values, &valid, median, params.clip);
    Annotation::new(values, valid, median, "")
}

/// Per-pixel masked statistics over a sample list.
struct PixelStats {
    mean: Vec<f64>,
    /// Population standard deviation; NaN where fewer than 2 samples were valid.
    sigma: Vec<f64>,
    count: Vec<u32>,
}

fn pixel_stats(samples: &[&Annotation]) -> PixelStats {
    let n = samples[0].patch.len();
    let mut sum = vec![0.0; n];
    let mut count = vec![0u32; n];
    for s in samples {
        for (i, (&v, &ok)) in s.patch.iter().zip(s.valid.iter()).enumerate() {
            if ok {
                sum[i] += v;
                count[i] += 1;
            }
        }
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect();
    let mut sq = vec![0.0; n];
    for s in samples {
        for (i, (&v, &ok)) in s.patch.iter().zip(s.valid.iter()).enumerate() {
            if ok {
                let d = v - mean[i];
                sq[i] += d * d;
            }
        }
    }
    let sigma = sq
        .iter()
        .zip(&count)
        .map(|(&q, &c)| if c >= 2 { (q / c as f64).sqrt() } else { f64::NAN })
        .collect();
    PixelStats { mean, sigma, count }
}

fn check_shapes(samples: &[&Annotation]) -> Result<()> {
    let first = samples.first().ok_or(Error::EmptyTrainingSet)?;
    if samples.iter().any(|s| !s.patch.same_shape(&first.patch)) {
        return Err(Error::InvalidInput("training samples differ in shape".into()));
    }
    Ok(())
}

/// Masked per-pixel mean of the samples.
pub fn train_single(samples: &[Annotation]) -> Result<DepthTemplate> {
    let refs: Vec<&Annotation> = samples.iter().collect();
    train_single_refs(&refs)
}

fn train_single_refs(samples: &[&Annotation]) -> Result<DepthTemplate> {
    check_shapes(samples)?;
    let stats = pixel_stats(samples);
    let (rows, cols) = (samples[0].rows(), samples[0].cols());
    Ok(DepthTemplate {
        values: Grid::from_vec(rows, cols, stats.mean).expect("shape"),
        n_train: samples.len(),
    })
}

/// Mean template plus weights `1 / max(sigma, sigma_floor)`.
pub fn train_weighted(samples: &[Annotation], sigma_floor: f64) -> Result<WeightedTemplate> {
    let refs: Vec<&Annotation> = samples.iter().collect();
    train_weighted_refs(&refs, sigma_floor)
}

fn train_weighted_refs(samples: &[&Annotation], sigma_floor: f64) -> Result<WeightedTemplate> {
    check_shapes(samples)?;
    if samples.len() == 1 {
        return Err(Error::SingleSample);
    }
    if !(sigma_floor > 0.0 && sigma_floor.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma_floor must be positive, got {sigma_floor}")));
    }
    let stats = pixel_stats(samples);
    let (rows, cols) = (samples[0].rows(), samples[0].cols());
    let weights: Vec<f64> = stats
        .sigma
        .iter()
        .zip(&stats.count)
        .map(|(&s, &c)| if c < 2 { 1.0 / sigma_floor } else { 1.0 / s.max(sigma_floor) })
        .collect();
    let template = DepthTemplate {
        values: Grid::from_vec(rows, cols, stats.mean).expect("shape"),
        n_train: samples.len(),
    };
    WeightedTemplate::new(template, Grid::from_vec(rows, cols, weights).expect("shape"))
}

/// Trains one member: weighted when `sigma_floor` is given, otherwise a
/// plain mean with unit weights.
fn train_member(samples: &[&Annotation], sigma_floor: Option<f64>) -> Result<WeightedTemplate> {
    match sigma_floor {
        Some(floor) => train_weighted_refs(samples, floor),
        None => train_single_refs(samples).map(WeightedTemplate::unweighted),
    }
}

/// Energy minimized by the weighted template, summed over pixels:
/// `w * mean_i (t - x_i)^2 + 1 / w`, counting only valid samples per pixel.
/// Its minimizer is `t = mean`, `w = 1 / sigma`.
pub fn weighted_energy(samples: &[Annotation], template: &[f64], weights: &[f64]) -> f64 {
    let n = template.len();
    let mut sq = vec![0.0; n];
    let mut count = vec![0u32; n];
    for s in samples {
        for (i, (&v, &ok)) in s.patch.iter().zip(s.valid.iter()).enumerate() {
            if ok {
                let d = template[i] - v;
                sq[i] += d * d;
                count[i] += 1;
            }
        }
    }
    (0..n)
        .filter(|&i| count[i] > 0)
        .map(|i| weights[i] * sq[i] / count[i] as f64 + 1.0 / weights[i])
        .sum()
}

/// Clusters the samples into `k` groups and trains one template per group.
/// `k == 1` yields a single-template set.
pub fn train_orientation_set(
    samples: &[Annotation],
    k: usize,
    seed: u64,
    sigma_floor: Option<f64>,
) -> Result<TemplateSet> {
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if k == 1 {
        let refs: Vec<&Annotation> = samples.iter().collect();
        return Ok(TemplateSet::single(train_member(&refs, sigma_floor)?));
    }
    let clusters = cluster::kmeans_cluster(samples, k, seed, cluster::DEFAULT_MAX_ITERS)?;
    let members = clusters
        .iter()
        .map(|c| {
            let refs: Vec<&Annotation> = c.iter().map(|&i| &samples[i]).collect();
            train_member(&refs, sigma_floor)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TemplateSet {
        kind: TemplateKind::Orientation,
        members,
        ranges: Vec::new(),
    })
}

/// Index of the half-open range containing `d`, if any.
pub fn range_of(ranges: &[DistanceRange], d: f64) -> Option<usize> {
    ranges.iter().position(|r| r.contains(d))
}

/// Buckets samples by `distance_m` and trains one template per range.
pub fn train_distance_set(
    samples: &[Annotation],
    ranges: &[DistanceRange],
    sigma_floor: Option<f64>,
) -> Result<TemplateSet> {
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let probe = TemplateSet {
        kind: TemplateKind::Distance,
        members: Vec::new(),
        ranges: ranges.to_vec(),
    };
    validate_ranges(ranges)?;
    let mut buckets: Vec<Vec<&Annotation>> = vec![Vec::new(); ranges.len()];
    for s in samples {
        let idx = range_of(ranges, s.distance_m)
            .ok_or_else(|| Error::InvalidInput(format!("no range contains {} m", s.distance_m)))?;
        buckets[idx].push(s);
    }
    let needed = if sigma_floor.is_some() { 2 } else { 1 };
    let mut members = Vec::with_capacity(ranges.len());
    for (range, bucket) in ranges.iter().zip(&buckets) {
        if bucket.len() < needed {
            return Err(Error::EmptyRange {
                lo: range.lo,
                hi: range.hi,
                count: bucket.len(),
            });
        }
        members.push(train_member(bucket, sigma_floor)?);
    }
    let set = TemplateSet { members, ..probe };
    set.validate()?;
    Ok(set)
}

fn validate_ranges(ranges: &[DistanceRange]) -> Result<()> {
    let ok = !ranges.is_empty()
        && ranges[0].lo <= 0.0
        && ranges.last().unwrap().hi == f64::INFINITY
        && ranges.iter().all(|r| r.lo < r.hi)
        && ranges.windows(2).all(|w| w[0].hi == w[1].lo);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput("distance ranges must be ordered, disjoint and cover (0, inf)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::ranges_from_boundaries;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant(rows: usize, cols: usize, v: f64) -> Annotation {
        Annotation::dense(Grid::filled(rows, cols, v), 3.0)
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, side: usize, holes: bool) -> Vec<Annotation> {
        (0..n)
            .map(|_| {
                let patch = Grid::from_fn(side, side, |_, _| rng.random_range(-0.5..0.5));
                let valid = Grid::from_fn(side, side, |_, _| !holes || rng.random_bool(0.8));
                let patch = Grid::from_fn(side, side, |r, c| if valid[(r, c)] { patch[(r, c)] } else { 0.0 });
                Annotation::new(patch, valid, rng.random_range(1.0..12.0), "r").unwrap()
            })
            .collect()
    }

    #[test]
    fn constant_patch_normalizes_to_zero() {
        let raw = Grid::filled(150, 150, 4.0);
        let a = normalize_annotation(&raw, &Grid::filled(150, 150, true), &NormalizeParams::default()).unwrap();
        assert!(a.patch.iter().all(|&v| v == 0.0));
        assert_eq!(a.distance_m, 4.0);
    }

    #[test]
    fn head_bump_is_negative_offset() {
        let raw = Grid::from_fn(150, 150, |r, c| if r < 30 && (60..90).contains(&c) { 3.8 } else { 4.0 });
        let a = normalize_annotation(&raw, &Grid::filled(150, 150, true), &NormalizeParams::default()).unwrap();
        assert!((a.patch[(10, 75)] + 0.2).abs() < 1e-12);
        assert_eq!(a.patch[(100, 10)], 0.0);
    }

    #[test]
    fn random_patch_has_zero_reference_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Grid::from_fn(97, 61, |_, _| rng.random_range(1.0..6.0));
        let mask = Grid::from_fn(97, 61, |_, _| rng.random_bool(0.9));
        let params = NormalizeParams {
            clip: f64::INFINITY,
            ..NormalizeParams::default()
        };
        let a = normalize_annotation(&raw, &mask, &params).unwrap();
        let mut centre = Vec::new();
        for r in 60..90 {
            for c in 60..90 {
                if a.valid[(r, c)] {
                    centre.push(a.patch[(r, c)]);
                }
            }
        }
        centre.sort_by(f64::total_cmp);
        let m = centre.len();
        let med = if m % 2 == 1 { centre[m / 2] } else { 0.5 * (centre[m / 2 - 1] + centre[m / 2]) };
        assert!(med.abs() < 1e-12);
    }

    #[test]
    fn sparse_reference_is_rejected() {
        let raw = Grid::filled(150, 150, 4.0);
        let mask = Grid::from_fn(150, 150, |r, _| r < 65);
        let err = normalize_annotation(&raw, &mask, &NormalizeParams::default()).unwrap_err();
        assert!(matches!(err, Error::TooSparse { .. }));
    }

    #[test]
    fn single_sample_and_pair_means() {
        let s = constant(4, 4, 0.7);
        assert_eq!(train_single(std::slice::from_ref(&s)).unwrap().values, s.patch);
        let t = train_single(&[constant(4, 4, 0.0), constant(4, 4, 2.0)]).unwrap();
        assert!(t.values.iter().all(|&v| v == 1.0));
        assert!(matches!(train_single(&[]), Err(Error::EmptyTrainingSet)));
    }

    #[test]
    fn many_samples_match_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(835);
        let samples = random_set(&mut rng, 835, 8, true);
        let t = train_single(&samples).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let (mut sum, mut n) = (0.0, 0);
                for s in &samples {
                    if s.valid[(r, c)] {
                        sum += s.patch[(r, c)];
                        n += 1;
                    }
                }
                assert!((t.values[(r, c)] - sum / n as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn weighted_closed_form_examples() {
        let w = train_weighted(&[constant(3, 3, 0.0), constant(3, 3, 2.0)], 0.01).unwrap();
        assert!(w.template.values.iter().all(|&v| v == 1.0));
        assert!(w.weights.iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let same = train_weighted(&[constant(3, 3, 0.4), constant(3, 3, 0.4)], 0.01).unwrap();
        assert!(same.weights.iter().all(|&v| v == 100.0));

        assert!(matches!(train_weighted(&[constant(3, 3, 0.0)], 0.01), Err(Error::SingleSample)));
    }

    #[test]
    fn weighted_template_equals_single_and_weights_invert_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = random_set(&mut rng, 17, 6, true);
        let w = train_weighted(&samples, 1e-3).unwrap();
        let t = train_single(&samples).unwrap();
        assert_eq!(w.template.values.as_slice(), t.values.as_slice());
        for r in 0..6 {
            for c in 0..6 {
                let vals: Vec<f64> = samples.iter().filter(|s| s.valid[(r, c)]).map(|s| s.patch[(r, c)]).collect();
                if vals.len() < 2 {
                    assert_eq!(w.weights[(r, c)], 1e3);
                    continue;
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let sigma = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
                if sigma >= 1e-3 {
                    assert!((w.weights[(r, c)] * sigma - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pixel_with_one_valid_sample_gets_floor_weight() {
        let mut a = constant(2, 2, 0.0);
        let b = constant(2, 2, 1.0);
        a.valid[(0, 0)] = false;
        let w = train_weighted(&[a, b], 0.05).unwrap();
        assert_eq!(w.weights[(0, 0)], 20.0);
        assert_eq!(w.template.values[(0, 0)], 1.0);
    }

    #[test]
    fn energy_gradient_vanishes_at_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let n = rng.random_range(2..20);
            let samples = random_set(&mut rng, n, 4, false);
            let w = train_weighted(&samples, 1e-9).unwrap();
            let t = w.template.values.as_slice().to_vec();
            let wt = w.weights.as_slice().to_vec();
            let h = 1e-6;
            for i in 0..t.len() {
                let mut tp = t.clone();
                let mut tm = t.clone();
                tp[i] += h;
                tm[i] -= h;
                let g = (weighted_energy(&samples, &tp, &wt) - weighted_energy(&samples, &tm, &wt)) / (2.0 * h);
                assert!(g.abs() < 1e-5, "dE/dt = {g}");
                let mut wp = wt.clone();
                let mut wm = wt.clone();
                wp[i] += h;
                wm[i] -= h;
                let g = (weighted_energy(&samples, &t, &wp) - weighted_energy(&samples, &t, &wm)) / (2.0 * h);
                assert!(g.abs() < 1e-5, "dE/dw = {g}");
            }
        }
    }

    #[test]
    fn distance_set_buckets_half_open() {
        let mut samples = Vec::new();
        for d in [1.0, 2.0, 4.0, 5.0, 7.0, 9.0] {
            samples.push(Annotation::dense(Grid::filled(3, 3, d), d));
        }
        let ranges = ranges_from_boundaries(&[0.0, 4.0, 7.0]).unwrap();
        let set = train_distance_set(&samples, &ranges, Some(0.01)).unwrap();
        assert_eq!(set.members.len(), 3);
        // 4.0 lands in [4, 7) together with 5.0
        assert_eq!(set.members[1].template.values[(0, 0)], 4.5);

        samples.remove(5);
        let err = train_distance_set(&samples, &ranges, Some(0.01)).unwrap_err();
        assert!(matches!(err, Error::EmptyRange { count: 1, .. }));
    }

    #[test]
    fn distance_buckets_partition_random_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ranges = ranges_from_boundaries(&[0.0, 4.0, 7.0]).unwrap();
        let samples = random_set(&mut rng, 60, 3, false);
        let set = train_distance_set(&samples, &ranges, None).unwrap();
        let mut expected = [0usize; 3];
        for s in &samples {
            let d = s.distance_m;
            let idx = if d < 4.0 {
                0
            } else if d < 7.0 {
                1
            } else {
                2
            };
            expected[idx] += 1;
        }
        let got: Vec<usize> = set.members.iter().map(|m| m.template.n_train).collect();
        assert_eq!(got, expected);
        assert_eq!(got.iter().sum::<usize>(), samples.len());
    }

    #[test]
    fn orientation_k1_is_single_and_two_modes_average() {
        let mut samples = Vec::new();
        for i in 0..6 {
            let base = if i % 2 == 0 { 0.0 } else { 5.0 };
            samples.push(constant(3, 3, base + 0.01 * i as f64));
        }
        let single = train_orientation_set(&samples, 1, 0, Some(0.01)).unwrap();
        assert_eq!(single.kind, TemplateKind::Single);

        let set = train_orientation_set(&samples, 2, 0, Some(0.01)).unwrap();
        assert_eq!(set.kind, TemplateKind::Orientation);
        let means: Vec<f64> = set.members.iter().map(|m| m.template.values[(0, 0)]).collect();
        assert!((means[0] - 0.02).abs() < 1e-12);
        assert!((means[1] - 5.03).abs() < 1e-12);
    }
}
