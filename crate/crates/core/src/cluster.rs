//! k-means over masked depth patches, silhouette scores and model selection.
//!
//! The distance between two patches is the Euclidean distance over the
//! cells valid in both, rescaled by `cells / jointly_valid` so that patches
//! with different hole patterns stay comparable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::training::Annotation;

pub const DEFAULT_MAX_ITERS: usize = 100;
/// Independent k-means++ starts; the lowest-inertia run wins.
const RESTARTS: usize = 8;

/// Flattened patch: values with invalid cells zeroed and a 0/1 mask.
#[derive(Clone, Debug)]
struct Flat {
    values: Vec<f64>,
    mask: Vec<f64>,
}

impl Flat {
    fn from_annotation(a: &Annotation) -> Self {
        let mask: Vec<f64> = a.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let values = a.patch.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Self { values, mask }
    }
}

fn masked_distance(a: &Flat, b: &Flat) -> f64 {
    let mut sum = 0.0;
    let mut joint = 0.0;
    for i in 0..a.values.len() {
        let m = a.mask[i] * b.mask[i];
        let d = a.values[i] - b.values[i];
        sum += m * d * d;
        joint += m;
    }
    let cells = a.values.len() as f64;
    if joint > 0.0 {
        (sum * cells / joint).sqrt()
    } else {
        // No overlap: compare with invalid cells read as the reference depth.
        a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
}

fn flatten(samples: &[Annotation]) -> Result<Vec<Flat>> {
    if let Some(first) = samples.first() {
        if samples.iter().any(|s| !s.patch.same_shape(&first.patch)) {
            return Err(Error::InvalidInput("samples differ in shape".into()));
        }
    }
    Ok(samples.iter().map(Flat::from_annotation).collect())
}

/// Symmetric matrix of pairwise patch distances, row-major `n * n`.
#[derive(Clone, Debug)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = f(i, j);
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

pub fn pairwise_distances(samples: &[Annotation]) -> Result<DistanceMatrix> {
    let flat = flatten(samples)?;
    Ok(DistanceMatrix::from_fn(flat.len(), |i, j| masked_distance(&flat[i], &flat[j])))
}

/// Masked mean of the members. A cell is valid if any member is valid there.
fn centroid(flat: &[Flat], members: &[usize]) -> Flat {
    let p = flat[0].values.len();
    let mut values = vec![0.0; p];
    let mut mask = vec![0.0; p];
    for &m in members {
        for i in 0..p {
            values[i] += flat[m].values[i];
            mask[i] += flat[m].mask[i];
        }
    }
    for i in 0..p {
        if mask[i] > 0.0 {
            values[i] /= mask[i];
            mask[i] = 1.0;
        }
    }
    Flat { values, mask }
}

fn kmeanspp_init(flat: &[Flat], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = flat.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = flat.iter().map(|f| masked_distance(f, &flat[chosen[0]]).powi(2)).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            if chosen.contains(&pick) {
                (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
            } else {
                pick
            }
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, f) in flat.iter().enumerate() {
            d2[i] = d2[i].min(masked_distance(f, &flat[next]).powi(2));
        }
    }
    chosen
}

/// One Lloyd run from the given seeds. Returns assignments and inertia.
fn lloyd(flat: &[Flat], seeds: &[usize], max_iters: usize) -> (Vec<usize>, f64) {
    let n = flat.len();
    let k = seeds.len();
    let mut centroids: Vec<Flat> = seeds.iter().map(|&s| flat[s].clone()).collect();
    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for (c, cen) in centroids.iter().enumerate() {
                let d = masked_distance(&flat[i], cen);
                if d < best.0 {
                    best = (d, c);
                }
            }
            dist[i] = best.0;
            if assign[i] != best.1 {
                assign[i] = best.1;
                changed = true;
            }
        }
        // Re-seed empty clusters with the point farthest from its centroid.
        let mut sizes = vec![0usize; k];
        for &a in &assign {
            sizes[a] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| sizes[assign[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = donor {
                sizes[assign[i]] -= 1;
                sizes[c] += 1;
                assign[i] = c;
                dist[i] = 0.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let groups = groups_of(&assign, k);
        centroids = groups.iter().map(|g| centroid(flat, g)).collect();
    }
    let inertia = dist.iter().map(|d| d * d).sum();
    (assign, inertia)
}

fn groups_of(assign: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); k];
    for (i, &a) in assign.iter().enumerate() {
        groups[a].push(i);
    }
    groups
}

/// Partitions the samples into `k` clusters. Clusters are returned sorted by
/// their smallest member, each with ascending indices.
pub fn kmeans_cluster(samples: &[Annotation], k: usize, seed: u64, max_iters: usize) -> Result<Vec<Vec<usize>>> {
    if k < 2 || samples.len() < k {
        return Err(Error::TooFewSamples {
            samples: samples.len(),
            k,
        });
    }
    let flat = flatten(samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..RESTARTS {
        let seeds = kmeanspp_init(&flat, k, &mut rng);
        let (assign, inertia) = lloyd(&flat, &seeds, max_iters);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((assign, inertia));
        }
    }
    let (assign, _) = best.expect("at least one restart");
    let mut groups: Vec<Vec<usize>> = groups_of(&assign, k).into_iter().filter(|g| !g.is_empty()).collect();
    groups.sort_by_key(|g| g[0]);
    Ok(groups)
}

fn check_partition(n: usize, clusters: &[Vec<usize>]) -> Result<()> {
    if clusters.len() < 2 {
        return Err(Error::DegenerateClustering(format!("{} cluster(s), need at least 2", clusters.len())));
    }
    let mut seen = vec![false; n];
    for c in clusters {
        if c.is_empty() {
            return Err(Error::DegenerateClustering("empty cluster".into()));
        }
        for &i in c {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::DegenerateClustering(format!("index {i} out of range or repeated")));
            }
        }
    }
    Ok(())
}

/// Mean silhouette over all clustered objects, from precomputed distances.
pub fn silhouette_from_distances(dist: &DistanceMatrix, clusters: &[Vec<usize>]) -> Result<f64> {
    check_partition(dist.len(), clusters)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (ci, c) in clusters.iter().enumerate() {
        for &i in c {
            count += 1;
            if c.len() == 1 {
                continue;
            }
            let a = c.iter().filter(|&&j| j != i).map(|&j| dist.get(i, j)).sum::<f64>() / (c.len() - 1) as f64;
            let b = clusters
                .iter()
                .enumerate()
                .filter(|&(cj, _)| cj != ci)
                .map(|(_, o)| o.iter().map(|&j| dist.get(i, j)).sum::<f64>() / o.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn silhouette_score(samples: &[Annotation], clusters: &[Vec<usize>]) -> Result<f64> {
    check_partition(samples.len(), clusters)?;
    silhouette_from_distances(&pairwise_distances(samples)?, clusters)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KSelection {
    pub k: usize,
    /// `(k, silhouette)` for every candidate, in the order given.
    pub scores: Vec<(usize, f64)>,
}

/// Clusters for each candidate `k` and keeps the best silhouette; ties go to
/// the smaller `k`.
pub fn select_k(samples: &[Annotation], k_range: &[usize], seed: u64) -> Result<KSelection> {
    if k_range.is_empty() {
        return Err(Error::InvalidInput("empty k range".into()));
    }
    let dist = pairwise_distances(samples)?;
    let mut scores = Vec::with_capacity(k_range.len());
    for &k in k_range {
        let clusters = kmeans_cluster(samples, k, seed, DEFAULT_MAX_ITERS)?;
        scores.push((k, silhouette_from_distances(&dist, &clusters)?));
    }
    let best = scores
        .iter()
        .copied()
        .fold(None, |best: Option<(usize, f64)>, (k, s)| match best {
            Some((bk, bs)) if bs > s || (bs == s && bk < k) => Some((bk, bs)),
            _ => Some((k, s)),
        })
        .expect("nonempty");
    Ok(KSelection { k: best.0, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn point(coords: &[f64]) -> Annotation {
        Annotation::dense(Grid::from_vec(1, coords.len(), coords.to_vec()).unwrap(), 1.0)
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Annotation> {
        (0..n)
            .map(|_| point(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect()
    }

    fn euclid(a: &Annotation, b: &Annotation) -> f64 {
        a.patch.iter().zip(b.patch.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    fn brute_silhouette(samples: &[Annotation], labels: &[usize]) -> f64 {
        let n = samples.len();
        let k = labels.iter().max().unwrap() + 1;
        let mut total = 0.0;
        for i in 0..n {
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += euclid(&samples[i], &samples[j]);
                    counts[labels[j]] += 1;
                }
            }
            if counts[labels[i]] == 0 {
                continue;
            }
            let a = sums[labels[i]] / counts[labels[i]] as f64;
            let b = (0..k)
                .filter(|&c| c != labels[i] && counts[c] > 0)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    fn within_sum_of_squares(samples: &[Annotation], labels: &[usize], k: usize) -> f64 {
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<&Annotation> = samples.iter().zip(labels).filter(|(_, &l)| l == c).map(|(s, _)| s).collect();
            if members.is_empty() {
                return f64::INFINITY;
            }
            let dim = members[0].patch.len();
            for d in 0..dim {
                let mean = members.iter().map(|m| m.patch.as_slice()[d]).sum::<f64>() / members.len() as f64;
                total += members.iter().map(|m| (m.patch.as_slice()[d] - mean).powi(2)).sum::<f64>();
            }
        }
        total
    }

    fn to_labels(clusters: &[Vec<usize>], n: usize) -> Vec<usize> {
        let mut labels = vec![0; n];
        for (c, members) in clusters.iter().enumerate() {
            for &i in members {
                labels[i] = c;
            }
        }
        labels
    }

    fn modes(rng: &mut ChaCha8Rng, centres: &[[f64; 2]], per_mode: usize, spread: f64) -> Vec<Annotation> {
        let mut out = Vec::new();
        for _ in 0..per_mode {
            for c in centres {
                out.push(point(&[c[0] + rng.random_range(-spread..spread), c[1] + rng.random_range(-spread..spread)]));
            }
        }
        out
    }

    #[test]
    fn identical_pairs_form_natural_clusters() {
        let a = point(&[0.0, 0.0]);
        let b = point(&[5.0, 5.0]);
        let samples = vec![a.clone(), b.clone(), a, b];
        assert_eq!(kmeans_cluster(&samples, 2, 7, 50).unwrap(), vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn k_equal_n_gives_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = random_points(&mut rng, 6, 3);
        let c = kmeans_cluster(&samples, 6, 0, 50).unwrap();
        assert_eq!(c, (0..6).map(|i| vec![i]).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_samples() {
        let samples = vec![point(&[0.0])];
        assert!(matches!(kmeans_cluster(&samples, 2, 0, 10), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn planted_modes_match_exhaustive_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let samples = modes(&mut rng, &[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]], 3, 0.6);
        let n = samples.len();
        let mut best = (f64::INFINITY, Vec::new());
        for code in 0..3usize.pow(n as u32) {
            let labels: Vec<usize> = (0..n).map(|i| code / 3usize.pow(i as u32) % 3).collect();
            let w = within_sum_of_squares(&samples, &labels, 3);
            if w < best.0 - 1e-12 {
                best = (w, labels);
            }
        }
        let clusters = kmeans_cluster(&samples, 3, 4, 100).unwrap();
        let got = within_sum_of_squares(&samples, &to_labels(&clusters, n), 3);
        assert!((got - best.0).abs() < 1e-9, "{got} vs {}", best.0);
    }

    #[test]
    fn kmeans_is_deterministic_and_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = random_points(&mut rng, 40, 4);
        let a = kmeans_cluster(&samples, 4, 9, 100).unwrap();
        assert_eq!(a, kmeans_cluster(&samples, 4, 9, 100).unwrap());
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn masked_distance_rescales_by_overlap() {
        let mut a = Annotation::dense(Grid::from_vec(1, 4, vec![0.0, 0.0, 9.0, 9.0]).unwrap(), 1.0);
        let b = Annotation::dense(Grid::from_vec(1, 4, vec![1.0, 1.0, 9.0, 9.0]).unwrap(), 1.0);
        a.valid[(0, 2)] = false;
        a.valid[(0, 3)] = false;
        let d = pairwise_distances(&[a, b]).unwrap();
        // two jointly valid cells with squared sum 2, scaled by 4 / 2
        assert!((d.get(0, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tight_far_clusters_score_high() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples = modes(&mut rng, &[[0.0, 0.0], [100.0, 0.0]], 5, 0.5);
        let clusters = vec![(0..10).step_by(2).collect(), (1..10).step_by(2).collect()];
        assert!(silhouette_score(&samples, &clusters).unwrap() > 0.9);
    }

    #[test]
    fn equal_a_and_b_scores_zero() {
        // 0 and 2 in one cluster, 1 in the other: object 0 has a = b = 1.
        let samples = vec![point(&[0.0]), point(&[1.0]), point(&[-1.0])];
        let d = pairwise_distances(&samples).unwrap();
        let s = silhouette_from_distances(&d, &[vec![0, 2], vec![1]]).unwrap();
        // object 0: a = 1, b = 1 -> 0; object 2: a = 1, b = 2 -> 0.5; singleton -> 0
        assert!((s - 0.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn six_points_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples = random_points(&mut rng, 6, 3);
        let labels = [0, 1, 0, 1, 1, 0];
        let clusters = vec![vec![0, 2, 5], vec![1, 3, 4]];
        let s = silhouette_score(&samples, &clusters).unwrap();
        assert!((s - brute_silhouette(&samples, &labels)).abs() < 1e-12);
    }

    #[test]
    fn silhouette_invariant_under_relabeling_and_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples = random_points(&mut rng, 9, 2);
        let clusters = vec![vec![0, 1, 2, 3], vec![4, 5], vec![6, 7, 8]];
        let s = silhouette_score(&samples, &clusters).unwrap();
        let relabeled = vec![clusters[2].clone(), clusters[0].clone(), clusters[1].clone()];
        assert!((s - silhouette_score(&samples, &relabeled).unwrap()).abs() < 1e-12);
        let (sin, cos) = 0.7f64.sin_cos();
        let moved: Vec<Annotation> = samples
            .iter()
            .map(|p| {
                let (x, y) = (p.patch[(0, 0)], p.patch[(0, 1)]);
                point(&[cos * x - sin * y + 3.0, sin * x + cos * y - 1.0])
            })
            .collect();
        assert!((s - silhouette_score(&moved, &clusters).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn one_cluster_is_degenerate() {
        let samples = vec![point(&[0.0]), point(&[1.0])];
        assert!(matches!(silhouette_score(&samples, &[vec![0, 1]]), Err(Error::DegenerateClustering(_))));
    }

    #[test]
    fn select_k_single_candidate_and_planted_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let samples = modes(&mut rng, &[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]], 4, 0.5);
        assert_eq!(select_k(&samples, &[2], 0).unwrap().k, 2);
        let sel = select_k(&samples, &[2, 3, 4, 5, 6], 0).unwrap();
        assert_eq!(sel.k, 4);
        assert_eq!(sel.scores.len(), 5);
    }
}
