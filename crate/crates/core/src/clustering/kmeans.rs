//! Lloyd's algorithm with k-means++ seeding.

use rand::Rng;

use super::{sq_dist, ClusterError, GroupPartition};
use crate::model::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansOutcome {
    pub partition: GroupPartition,
    /// Objective after each centroid update.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    /// True if the assignment reached a fixpoint before `max_iters`.
    pub converged: bool,
}

impl KmeansOutcome {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }
}

/// k-means++ seeding. Also returns, for every point, the nearest seed (ties
/// to the earlier seed) and the distance to it.
fn seed_plus_plus<R: Rng + ?Sized>(
    points: &EmbeddingMatrix,
    k: usize,
    rng: &mut R,
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let n = points.rows();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    let mut nearest = vec![0usize; n];

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every remaining point duplicates a chosen centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        let c = points.row(next).to_vec();
        let id = centroids.len();
        // a point whose current seed is at least twice as far from the new
        // seed as from the point cannot get closer
        let to_new: Vec<f64> = centroids.iter().map(|s| sq_dist(s, &c)).collect();
        for (i, d) in d2.iter_mut().enumerate() {
            if to_new[nearest[i]] >= 4.0 * *d {
                continue;
            }
            let nd = sq_dist(points.row(i), &c);
            if nd < *d {
                *d = nd;
                nearest[i] = id;
            }
        }
        centroids.push(c);
    }
    (centroids, nearest, d2)
}

/// Centroids stored row-major in one buffer.
struct Centroids {
    dim: usize,
    data: Vec<f64>,
}

impl Centroids {
    fn from_rows(dim: usize, rows: Vec<Vec<f64>>) -> Self {
        Self {
            dim,
            data: rows.into_iter().flatten().collect(),
        }
    }

    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }

    /// Nearest centroid (ties to the lower index) and the two smallest
    /// squared distances.
    fn nearest_two(&self, x: &[f64]) -> (usize, f64, f64) {
        let mut best = 0;
        let mut d1 = f64::INFINITY;
        let mut d2 = f64::INFINITY;
        for c in 0..self.len() {
            let d = sq_dist(x, self.row(c));
            if d < d1 {
                d2 = d1;
                d1 = d;
                best = c;
            } else if d < d2 {
                d2 = d;
            }
        }
        (best, d1, d2)
    }

    /// Half the distance from each centroid to its closest other centroid.
    fn half_separation(&self) -> Vec<f64> {
        let k = self.len();
        let mut s = vec![f64::INFINITY; k];
        for a in 0..k {
            for b in a + 1..k {
                let d = sq_dist(self.row(a), self.row(b));
                s[a] = s[a].min(d);
                s[b] = s[b].min(d);
            }
        }
        s.iter_mut().for_each(|v| *v = 0.5 * v.sqrt());
        s
    }
}

/// Moves the point farthest from its centroid into each empty cluster.
/// Returns true if any label changed.
fn repair_empty(points: &EmbeddingMatrix, centroids: &Centroids, labels: &mut [usize], sizes: &mut [usize]) -> bool {
    if sizes.iter().all(|&s| s > 0) {
        return false;
    }
    let mut dists: Vec<f64> = (0..points.rows())
        .map(|i| sq_dist(points.row(i), centroids.row(labels[i])))
        .collect();
    for e in 0..sizes.len() {
        if sizes[e] > 0 {
            continue;
        }
        let mut pick = None;
        let mut far = f64::NEG_INFINITY;
        for i in 0..points.rows() {
            if sizes[labels[i]] > 1 && dists[i] > far {
                far = dists[i];
                pick = Some(i);
            }
        }
        let i = pick.expect("k <= n leaves a cluster with two or more members");
        sizes[labels[i]] -= 1;
        labels[i] = e;
        sizes[e] = 1;
        dists[i] = 0.0;
    }
    true
}

fn update_centroids(points: &EmbeddingMatrix, labels: &[usize], k: usize) -> Centroids {
    let dim = points.dim();
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &g) in labels.iter().enumerate() {
        counts[g] += 1;
        for (s, v) in sums[g * dim..(g + 1) * dim].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for (g, &c) in counts.iter().enumerate() {
        let inv = 1.0 / c as f64;
        sums[g * dim..(g + 1) * dim].iter_mut().for_each(|v| *v *= inv);
    }
    Centroids { dim, data: sums }
}

fn objective(points: &EmbeddingMatrix, labels: &[usize], centroids: &Centroids) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &g)| sq_dist(points.row(i), centroids.row(g)))
        .sum()
}

/// Partitions the rows of `points` into `k` groups.
///
/// Seeds with k-means++, then alternates nearest-centroid assignment and mean
/// updates until the assignment stops changing or `max_iters` updates have
/// run. A cluster left empty by the assignment step takes the point farthest
/// from its own centroid.
///
/// Assignment keeps Hamerly's upper and lower distance bounds per point so
/// that points which provably keep their centroid are not rescanned.
pub fn kmeans<R: Rng + ?Sized>(
    points: &EmbeddingMatrix,
    k: usize,
    rng: &mut R,
    max_iters: usize,
) -> Result<KmeansOutcome, ClusterError> {
    let n = points.rows();
    if n == 0 {
        return Err(ClusterError::Empty);
    }
    if k == 0 || k > n {
        return Err(ClusterError::InvalidK { k, rows: n });
    }

    let (seeds, labels, seed_d2) = seed_plus_plus(points, k, rng);
    let mut centroids = Centroids::from_rows(points.dim(), seeds);
    // The seeding pass already assigned every point to its nearest seed.
    let mut labels = labels;
    let mut upper: Vec<f64> = seed_d2.iter().map(|d| d.sqrt()).collect();
    let mut lower = vec![0.0; n];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut changed = true;
    let mut fresh = false;
    let mut use_separation = k > 1;

    loop {
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        if repair_empty(points, &centroids, &mut labels, &mut sizes) {
            changed = true;
            // moved points lose their bounds
            fresh = true;
        }
        if !changed {
            converged = true;
            break;
        }
        if iterations == max_iters.max(1) {
            break;
        }

        let next = update_centroids(points, &labels, k);
        let moves: Vec<f64> = (0..k).map(|c| sq_dist(centroids.row(c), next.row(c)).sqrt()).collect();
        let max_move = moves.iter().copied().fold(0.0, f64::max);
        for i in 0..n {
            upper[i] += moves[labels[i]];
            lower[i] -= max_move;
        }
        centroids = next;
        trace.push(objective(points, &labels, &centroids));
        iterations += 1;

        changed = false;
        let half_sep = use_separation.then(|| centroids.half_separation());
        let mut separation_skips = 0usize;
        for i in 0..n {
            let x = points.row(i);
            if !fresh {
                let a = labels[i];
                let sep = half_sep.as_ref().map_or(0.0, |s| s[a]);
                let bound = sep.max(lower[i]);
                if upper[i] <= bound {
                    separation_skips += usize::from(upper[i] > lower[i]);
                    continue;
                }
                upper[i] = sq_dist(x, centroids.row(a)).sqrt();
                if upper[i] <= bound {
                    separation_skips += usize::from(upper[i] > lower[i]);
                    continue;
                }
            }
            let (c, d1, d2) = centroids.nearest_two(x);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            upper[i] = d1.sqrt();
            lower[i] = d2.sqrt();
        }
        fresh = false;
        // the separation pass costs about K^2/2 distances and saves K per
        // skipped point; drop it once it stops paying for itself
        if use_separation && 2 * separation_skips < k {
            use_separation = false;
        }
    }

    let partition = GroupPartition::from_labels(points, &labels, k);
    if trace.is_empty() {
        trace.push(partition.objective(points));
    }
    Ok(KmeansOutcome {
        partition,
        objective_trace: trace,
        iterations,
        converged,
    })
}
