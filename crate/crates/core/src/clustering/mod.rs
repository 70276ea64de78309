//! Clustering of gradient rows.
//!
//! [`kmeans`] groups rows by Euclidean distance; [`cluster_and_split`] starts
//! from a k-means partition and keeps bisecting the least direction-coherent
//! group until every group is coherent enough or a group cap is reached.

mod kmeans;
mod split;

pub use kmeans::{kmeans, KmeansOutcome};
pub use split::{
    avg_cos_sim, binary_split, cluster_and_split, group_bounds, round_half_up, split_from,
    AdaptiveParams, SplitOutcome, SplitStep, StopReason, ThresholdHistory,
};

use std::collections::HashSet;

use thiserror::Error;

use crate::model::{dot, EmbeddingMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("cannot cluster an empty set of rows")]
    Empty,
    #[error("requested {k} groups for {rows} rows")]
    InvalidK { k: usize, rows: usize },
    #[error("cannot split a group with {0} member(s)")]
    Unsplittable(usize),
    #[error("fluctuation factor must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
}

/// One group: indices into the clustered point set plus the member mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub members: Vec<usize>,
    pub centroid: Vec<f64>,
}

impl Group {
    pub fn from_members(points: &EmbeddingMatrix, members: Vec<usize>) -> Self {
        let centroid = mean_of(points, &members);
        Self { members, centroid }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Disjoint, exhaustive grouping of a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    pub groups: Vec<Group>,
}

impl GroupPartition {
    /// Builds groups from a per-point label vector; labels must cover `0..k`.
    pub fn from_labels(points: &EmbeddingMatrix, labels: &[usize], k: usize) -> Self {
        let mut members = vec![Vec::new(); k];
        for (i, &g) in labels.iter().enumerate() {
            members[g].push(i);
        }
        Self {
            groups: members
                .into_iter()
                .map(|m| Group::from_members(points, m))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Group label of every point.
    pub fn labels(&self, num_points: usize) -> Vec<usize> {
        let mut labels = vec![usize::MAX; num_points];
        for (g, group) in self.groups.iter().enumerate() {
            for &m in &group.members {
                labels[m] = g;
            }
        }
        labels
    }

    /// Sum over groups of squared distances from members to their centroid.
    pub fn objective(&self, points: &EmbeddingMatrix) -> f64 {
        self.groups
            .iter()
            .map(|g| {
                g.members
                    .iter()
                    .map(|&m| sq_dist(points.row(m), &g.centroid))
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn min_avg_cos(&self, points: &EmbeddingMatrix) -> f64 {
        self.groups
            .iter()
            .map(|g| avg_cos_sim(points, &g.members, &g.centroid))
            .fold(f64::INFINITY, f64::min)
    }

    /// Checks disjointness, coverage of `0..num_points`, non-empty groups and
    /// that centroids are member means within `tol`.
    pub fn validate(&self, points: &EmbeddingMatrix, tol: f64) -> Result<(), String> {
        let mut seen = vec![false; points.rows()];
        for (g, group) in self.groups.iter().enumerate() {
            if group.members.is_empty() {
                return Err(format!("group {g} is empty"));
            }
            for &m in &group.members {
                if m >= points.rows() {
                    return Err(format!("group {g} references row {m} out of range"));
                }
                if std::mem::replace(&mut seen[m], true) {
                    return Err(format!("row {m} appears in more than one group"));
                }
            }
            let mean = mean_of(points, &group.members);
            if mean
                .iter()
                .zip(&group.centroid)
                .any(|(a, b)| (a - b).abs() > tol)
            {
                return Err(format!("group {g} centroid is not the member mean"));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(format!("row {missing} is not assigned"));
        }
        Ok(())
    }
}

pub fn mean_of(points: &EmbeddingMatrix, members: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; points.dim()];
    if members.is_empty() {
        return mean;
    }
    for &m in members {
        for (acc, v) in mean.iter_mut().zip(points.row(m)) {
            *acc += v;
        }
    }
    let inv = 1.0 / members.len() as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    mean
}

/// Squared Euclidean distance, summed in four interleaved lanes.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero-norm inputs give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Number of bitwise-distinct rows.
pub fn distinct_rows(points: &EmbeddingMatrix) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(points.rows());
    for i in 0..points.rows() {
        seen.insert(points.row(i).iter().map(|v| v.to_bits()).collect());
    }
    seen.len()
}
