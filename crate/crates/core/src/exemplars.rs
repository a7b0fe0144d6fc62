//! Per-category exemplar banks built by K-means over training frames.
//!
//! Bank file (`.clrb`, little-endian): magic `CLRB`, version `u32 = 1`,
//! `C: u32`, `M: u32`, `D: u32`, then `(C+1)·M·D` `f32` values ordered by
//! class, then exemplar, then feature.

use std::path::Path;

use crate::dataset::FeatureDataset;
use crate::error::{Error, Result};
use crate::io::{read_file, to_u32, write_atomic, Decoder, Encoder};
use crate::numeric::{Rng, Tensor};
use crate::par::Exec;

pub const BANK_MAGIC: &[u8; 4] = b"CLRB";
pub const BANK_VERSION: u32 = 1;

/// Lloyd iteration limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once the objective improves by at most `tol` relative to its
    /// previous value.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `M × D`.
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub objective: f64,
    /// Objective after each assignment step.
    pub history: Vec<f64>,
    /// Number of empty clusters reseeded.
    pub repairs: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Empty clusters are reseeded with the point farthest from its centroid.
/// Distance ties go to the lowest centroid index.
pub fn kmeans(points: &Tensor, k: usize, rng: &mut Rng, params: KMeansParams) -> Result<KMeans> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::Parameter(format!(
            "k-means needs 1 ≤ M ≤ N, got M = {k}, N = {n}"
        )));
    }
    if params.max_iter == 0 {
        return Err(Error::Parameter("k-means needs max_iter ≥ 1".into()));
    }
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignments = vec![0; n];
    let mut history = Vec::new();
    let mut repairs = 0;

    for iter in 0..params.max_iter {
        let objective = assign(points, &centroids, &mut assignments);
        let converged = match history.last() {
            Some(&prev) => objective == 0.0 || prev - objective <= params.tol * prev,
            None => objective == 0.0,
        };
        history.push(objective);
        if converged || iter + 1 == params.max_iter {
            break;
        }
        repairs += update(points, &mut centroids, &mut assignments);
    }
    // Duplicate points can leave a cluster empty even at convergence.
    let mut counts = cluster_sizes(&assignments, k);
    if counts.contains(&0) {
        repairs += repair_empty(points, &mut centroids, &mut assignments, &mut counts);
        let objective = points
            .iter_rows()
            .zip(&assignments)
            .map(|(p, &c)| sq_dist(p, centroids.row(c)))
            .sum();
        history.push(objective);
    }
    let objective = *history.last().expect("at least one iteration");
    if !objective.is_finite() {
        return Err(Error::Numeric("k-means objective is not finite".into()));
    }
    Ok(KMeans {
        centroids,
        assignments,
        objective,
        history,
        repairs,
    })
}

fn plus_plus_init(points: &Tensor, k: usize, rng: &mut Rng) -> Tensor {
    let n = points.rows();
    let mut centroids = Tensor::zeros(k, points.cols());
    let first = rng.index(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut nearest: Vec<f64> = points.iter_rows().map(|p| sq_dist(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            // Rounding can run past the end; fall back to the last positive weight.
            if nearest[pick] == 0.0 {
                pick = nearest.iter().rposition(|d| *d > 0.0).expect("total > 0");
            }
            pick
        } else {
            rng.index(n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

fn assign(points: &Tensor, centroids: &Tensor, assignments: &mut [usize]) -> f64 {
    let mut objective = 0.0;
    for (i, p) in points.iter_rows().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.iter_rows().enumerate() {
            let d = sq_dist(p, centroid);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        assignments[i] = best;
        objective += best_d;
    }
    objective
}

/// Moves centroids to cluster means and repairs empty clusters; returns the
/// number of repairs.
fn update(points: &Tensor, centroids: &mut Tensor, assignments: &mut [usize]) -> usize {
    let k = centroids.rows();
    let mut sums = Tensor::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter_rows().zip(assignments.iter()) {
        crate::numeric::axpy(1.0, p, sums.row_mut(c));
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }
    repair_empty(points, centroids, assignments, &mut counts)
}

fn cluster_sizes(assignments: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &c in assignments {
        counts[c] += 1;
    }
    counts
}

/// Reseeds every empty cluster with the point farthest from its centroid,
/// taken from clusters that can spare a member.
fn repair_empty(
    points: &Tensor,
    centroids: &mut Tensor,
    assignments: &mut [usize],
    counts: &mut [usize],
) -> usize {
    let mut repairs = 0;
    for c in 0..counts.len() {
        if counts[c] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, p) in points.iter_rows().enumerate() {
            let owner = assignments[i];
            if counts[owner] < 2 {
                continue;
            }
            let d = sq_dist(p, centroids.row(owner));
            if d > far_d {
                far = Some(i);
                far_d = d;
            }
        }
        let i = far.expect("N ≥ M leaves a cluster with at least two members");
        counts[assignments[i]] -= 1;
        assignments[i] = c;
        counts[c] = 1;
        centroids.row_mut(c).copy_from_slice(points.row(i));
        repairs += 1;
    }
    repairs
}

/// `M` exemplars for each class `0..=C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarBank {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// `(C+1)·M × D`; rows `c·M .. (c+1)·M` belong to class `c`.
    pub exemplars: Tensor,
}

impl ExemplarBank {
    pub fn new(num_classes: usize, per_class: usize, exemplars: Tensor) -> Result<Self> {
        if per_class == 0 || exemplars.rows() != (num_classes + 1) * per_class {
            return Err(Error::Dimension(format!(
                "bank with C = {num_classes}, M = {per_class} needs {} rows, got {}",
                (num_classes + 1) * per_class,
                exemplars.rows()
            )));
        }
        if !exemplars.is_finite() {
            return Err(Error::Numeric("non-finite exemplar".into()));
        }
        Ok(ExemplarBank {
            num_classes,
            per_class,
            dim: exemplars.cols(),
            exemplars,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.num_classes + 1
    }

    pub fn exemplar(&self, class: usize, i: usize) -> &[f64] {
        self.exemplars.row(class * self.per_class + i)
    }

    pub fn class_exemplars(&self, class: usize) -> Tensor {
        self.exemplars
            .slice_rows(class * self.per_class, (class + 1) * self.per_class)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut enc = Encoder::new(BANK_MAGIC, BANK_VERSION);
        enc.u32(to_u32(self.num_classes, "C")?);
        enc.u32(to_u32(self.per_class, "M")?);
        enc.u32(to_u32(self.dim, "D")?);
        for &v in self.exemplars.as_slice() {
            enc.f32(v as f32);
        }
        Ok(enc.finish())
    }

    pub fn from_bytes(what: &str, bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(what, bytes, BANK_MAGIC, BANK_VERSION)?;
        let num_classes = dec.u32()? as usize;
        let per_class = dec.u32()? as usize;
        let dim = dec.u32()? as usize;
        let count = (num_classes + 1) * per_class * dim;
        if dec.remaining() != 4 * count {
            return Err(Error::Format(format!(
                "{what}: header declares {count} values but {} bytes follow",
                dec.remaining()
            )));
        }
        let data = (0..count)
            .map(|_| dec.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let exemplars = Tensor::from_vec((num_classes + 1) * per_class, dim, data)?;
        ExemplarBank::new(num_classes, per_class, exemplars)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&path.display().to_string(), &read_file(path)?)
    }
}

/// Clusters each class's training frames independently into `m` exemplars.
pub fn build_bank(train: &FeatureDataset, m: usize, rng: &mut Rng) -> Result<ExemplarBank> {
    build_bank_with(train, m, rng, KMeansParams::default(), Exec::default())
}

pub fn build_bank_with(
    train: &FeatureDataset,
    m: usize,
    rng: &mut Rng,
    params: KMeansParams,
    exec: Exec,
) -> Result<ExemplarBank> {
    if m == 0 {
        return Err(Error::Parameter("M must be at least 1".into()));
    }
    let counts = train.class_counts();
    if let Some(class) = (0..counts.len()).find(|&c| counts[c] < m) {
        return Err(Error::Data(format!(
            "class {class} has {} training frames, fewer than M = {m}",
            counts[class]
        )));
    }
    // One independent stream per class keeps results identical across
    // execution strategies.
    let base = rng.next_u64();
    let results = exec.map_range(train.num_classes + 1, |class| {
        let points = train.frames_of_class(class);
        kmeans(&points, m, &mut Rng::with_stream(base, class as u64), params)
    });
    let mut data = Vec::with_capacity((train.num_classes + 1) * m * train.dim);
    for result in results {
        data.extend_from_slice(result?.centroids.as_slice());
    }
    let exemplars = Tensor::from_vec((train.num_classes + 1) * m, train.dim, data)?;
    ExemplarBank::new(train.num_classes, m, exemplars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureSequence, Span, Split};

    fn blobs(rng: &mut Rng) -> (Tensor, [Vec<f64>; 2]) {
        let means = [vec![0.0, 0.0], vec![6.0, 8.0]];
        let mut rows = Vec::new();
        for mean in &means {
            for _ in 0..50 {
                rows.push(vec![mean[0] + 0.01 * rng.normal(), mean[1] + 0.01 * rng.normal()]);
            }
        }
        (Tensor::from_rows(&rows).unwrap(), means)
    }

    #[test]
    fn n_equals_m_recovers_points() {
        let pts = Tensor::from_rows(&[[0.0, 1.0], [2.0, -1.0], [5.0, 5.0], [-3.0, 0.5]]).unwrap();
        let km = kmeans(&pts, 4, &mut Rng::new(9), KMeansParams::default()).unwrap();
        assert_eq!(km.objective, 0.0);
        let mut got: Vec<Vec<f64>> = km.centroids.iter_rows().map(<[f64]>::to_vec).collect();
        let mut want: Vec<Vec<f64>> = pts.iter_rows().map(<[f64]>::to_vec).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn two_blobs() {
        let mut rng = Rng::new(3);
        let (pts, means) = blobs(&mut rng);
        let km = kmeans(&pts, 2, &mut rng, KMeansParams::default()).unwrap();
        for mean in &means {
            let closest = km
                .centroids
                .iter_rows()
                .map(|c| sq_dist(c, mean).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(closest < 0.1, "{closest}");
        }
    }

    #[test]
    fn two_blob_optimum_matches_exhaustive_partition() {
        // Exhaustive search over all 2-partitions of a 10-point subsample.
        let mut rng = Rng::new(4);
        let (pts, _) = blobs(&mut rng);
        let rows: Vec<usize> = (0..5).chain(50..55).collect();
        let sub = Tensor::from_rows(&rows.iter().map(|&r| pts.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << 10) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<&[f64]> = (0..10)
                    .filter(|i| ((mask >> i) & 1 == 1) == side)
                    .map(|i| sub.row(i))
                    .collect();
                let mut mean = [0.0; 2];
                for m in &members {
                    mean[0] += m[0] / members.len() as f64;
                    mean[1] += m[1] / members.len() as f64;
                }
                cost += members.iter().map(|m| sq_dist(m, &mean)).sum::<f64>();
            }
            best = best.min(cost);
        }
        let km = kmeans(&sub, 2, &mut Rng::new(1), KMeansParams::default()).unwrap();
        assert!((km.objective - best).abs() <= 1e-9 * best.max(1.0), "{} vs {best}", km.objective);
    }

    #[test]
    fn identical_points_repair_an_empty_cluster() {
        let pts = Tensor::from_rows(&vec![vec![1.5, -2.0]; 6]).unwrap();
        let km = kmeans(&pts, 2, &mut Rng::new(0), KMeansParams::default()).unwrap();
        assert_eq!(km.objective, 0.0);
        assert_eq!(km.repairs, 1);
        assert!(km.centroids.iter_rows().all(|c| c == [1.5, -2.0]));
    }

    #[test]
    fn repair_path_runs_when_init_duplicates() {
        // Two identical points plus a third: k-means++ cannot seed three
        // distinct centroids when two rows coincide and M = N.
        let pts = Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [3.0, 3.0]]).unwrap();
        let km = kmeans(&pts, 3, &mut Rng::new(2), KMeansParams::default()).unwrap();
        assert_eq!(km.objective, 0.0);
        assert!(km.repairs >= 1);
    }

    #[test]
    fn too_few_points() {
        let pts = Tensor::zeros(2, 3);
        assert!(matches!(
            kmeans(&pts, 3, &mut Rng::new(0), KMeansParams::default()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn objective_never_increases() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let pts = Tensor::from_vec(200, 3, (0..600).map(|_| rng.normal() * 3.0).collect()).unwrap();
            let km = kmeans(&pts, 7, &mut rng, KMeansParams { max_iter: 100, tol: 0.0 }).unwrap();
            for w in km.history.windows(2) {
                assert!(w[1] <= w[0], "seed {seed}: {:?}", km.history);
            }
        }
    }

    fn one_video(labels: Vec<usize>, spans: Vec<Span>, c: usize) -> FeatureDataset {
        let len = labels.len();
        let frames = Tensor::from_vec(len, 2, (0..2 * len).map(|i| (i % 7) as f64).collect()).unwrap();
        FeatureDataset::new(c, 2, Split::Train, vec![FeatureSequence::new("v", frames, labels, spans, c).unwrap()]).unwrap()
    }

    #[test]
    fn m_one_is_class_mean() {
        let ds = one_video(vec![0, 0, 1, 1, 1, 0], vec![Span::new(1, 2, 4)], 1);
        let bank = build_bank(&ds, 1, &mut Rng::new(0)).unwrap();
        for class in 0..=1 {
            let pts = ds.frames_of_class(class);
            for d in 0..2 {
                let mean = pts.iter_rows().map(|r| r[d]).sum::<f64>() / pts.rows() as f64;
                assert!((bank.exemplar(class, 0)[d] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_with_too_few_frames_is_named() {
        let ds = one_video(vec![0, 0, 0, 3, 3, 0, 1, 1, 2, 2, 2], vec![Span::new(3, 3, 4), Span::new(1, 6, 7), Span::new(2, 8, 10)], 3);
        let err = build_bank(&ds, 3, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Data(ref msg) if msg.contains("class 1")), "{err}");
        let ds = one_video(vec![0, 0, 0, 0, 3, 3, 1, 1, 1, 2, 2, 2], vec![Span::new(3, 4, 5), Span::new(1, 6, 8), Span::new(2, 9, 11)], 3);
        let err = build_bank(&ds, 3, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Data(ref msg) if msg.contains("class 3")), "{err}");
    }

    #[test]
    fn bank_bytes_round_trip() {
        let ex = Tensor::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.5).collect()).unwrap();
        let bank = ExemplarBank::new(1, 2, ex).unwrap();
        let bytes = bank.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CLRB");
        assert_eq!(ExemplarBank::from_bytes("b", &bytes).unwrap(), bank);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ExemplarBank::from_bytes("b", &bad), Err(Error::Format(_))));
    }
}
