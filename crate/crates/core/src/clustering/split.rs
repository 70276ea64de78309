//! Adaptive cluster-and-split.
//!
//! Rows are first grouped into `C_i = round(C_e * (1 - alpha))` k-means
//! groups. The group with the lowest average member-to-centroid cosine is
//! then bisected, one split at a time, until every group is at least as
//! coherent as the current threshold or the cap `C_m = round(C_e * (1 + alpha))`
//! is reached. The threshold is the running mean of the minimum coherence
//! observed at exactly `C_e` groups in earlier rounds; the first round has no
//! threshold and splits straight to `C_e`.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use log::warn;
use rand::Rng;

use super::{distinct_rows, kmeans, norm, ClusterError, Group, GroupPartition};
use crate::model::{dot, EmbeddingMatrix};

/// Rounds half-way cases away from zero for non-negative inputs.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// `(C_i, C_m)` for a target group count and fluctuation factor.
pub fn group_bounds(target: usize, alpha: f64) -> (usize, usize) {
    let lo = round_half_up(target as f64 * (1.0 - alpha)).max(1);
    let hi = round_half_up(target as f64 * (1.0 + alpha)).max(lo);
    (lo, hi)
}

/// Mean cosine between each member and the centroid. Zero vectors on either
/// side contribute 0.
pub fn avg_cos_sim(points: &EmbeddingMatrix, members: &[usize], centroid: &[f64]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let cn = norm(centroid);
    if cn == 0.0 {
        return 0.0;
    }
    let total: f64 = members
        .iter()
        .map(|&m| {
            let x = points.row(m);
            let xn = norm(x);
            if xn == 0.0 {
                0.0
            } else {
                (dot(x, centroid) / (xn * cn)).clamp(-1.0, 1.0)
            }
        })
        .sum();
    total / members.len() as f64
}

/// Bisects a group around its least similar pair of members.
///
/// The two members with the lowest pairwise cosine (first such pair in
/// member order) seed the halves; every other member joins the first seed
/// when its cosine to it is at least its cosine to the second seed. Seeds
/// always stay in their own half, so both halves are non-empty.
pub fn binary_split(points: &EmbeddingMatrix, group: &Group) -> Result<(Group, Group), ClusterError> {
    let m = group.members.len();
    if m < 2 {
        return Err(ClusterError::Unsplittable(m));
    }
    let dim = points.dim();
    let unit: Vec<Vec<f64>> = group
        .members
        .iter()
        .map(|&i| {
            let x = points.row(i);
            let n = norm(x);
            if n == 0.0 {
                vec![0.0; dim]
            } else {
                x.iter().map(|v| v / n).collect()
            }
        })
        .collect();

    let mut seeds = (0, 1);
    let mut lowest = f64::INFINITY;
    for a in 0..m {
        for b in (a + 1)..m {
            let c = dot(&unit[a], &unit[b]);
            if c < lowest {
                lowest = c;
                seeds = (a, b);
            }
        }
    }

    let (s1, s2) = seeds;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (k, &idx) in group.members.iter().enumerate() {
        let joins_first = if k == s1 {
            true
        } else if k == s2 {
            false
        } else {
            dot(&unit[k], &unit[s1]) >= dot(&unit[k], &unit[s2])
        };
        if joins_first {
            first.push(idx);
        } else {
            second.push(idx);
        }
    }
    Ok((
        Group::from_members(points, first),
        Group::from_members(points, second),
    ))
}

/// Minimum per-round coherence values observed at the target group count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThresholdHistory {
    recorded: Vec<f64>,
}

impl ThresholdHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, value: f64) {
        assert!(
            (-1.0..=1.0).contains(&value),
            "cosine values lie in [-1, 1], got {value}"
        );
        self.recorded.push(value);
    }

    pub fn recorded(&self) -> &[f64] {
        &self.recorded
    }

    /// Mean of all recorded values; `None` before the first record.
    pub fn current(&self) -> Option<f64> {
        if self.recorded.is_empty() {
            None
        } else {
            Some(self.recorded.iter().sum::<f64>() / self.recorded.len() as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveParams {
    /// Target group count `C_e`.
    pub target: usize,
    pub alpha: f64,
    pub kmeans_max_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// First round: split straight to the target.
    Target,
    /// Every group reached the coherence threshold.
    Threshold,
    /// Group cap reached.
    MaxGroups,
    /// No group has two or more members left to split.
    Exhausted,
}

/// One bisection: which group was split, and the state right after it.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitStep {
    pub split_group: usize,
    pub group_count: usize,
    pub min_avg_cos: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    /// Partitions captured at requested sizes up to the stopping point.
    pub snapshots: BTreeMap<usize, GroupPartition>,
    /// Partition at the stopping point; this is the one to transmit.
    pub used: GroupPartition,
    pub stop: StopReason,
    /// Minimum group coherence when the count first equals the target.
    pub recorded: Option<f64>,
    pub min_avg_cos_used: f64,
    /// Bisections performed, including those made only to record the value
    /// at the target after an early stop.
    pub trace: Vec<SplitStep>,
    pub initial_groups: usize,
    pub max_groups: usize,
    pub initial_objective: f64,
}

impl SplitOutcome {
    /// Partition for a client that can receive at most `budget` actions:
    /// the largest captured size not above the budget, or the stopping
    /// partition when it is smaller.
    pub fn partition_for_budget(&self, budget: usize) -> Option<&GroupPartition> {
        if self.used.len() <= budget {
            return Some(&self.used);
        }
        self.snapshots.range(..=budget).next_back().map(|(_, p)| p)
    }
}

struct SplitState<'a> {
    points: &'a EmbeddingMatrix,
    groups: Vec<Group>,
    coherence: Vec<f64>,
    trace: Vec<SplitStep>,
}

impl<'a> SplitState<'a> {
    fn new(points: &'a EmbeddingMatrix, partition: GroupPartition) -> Self {
        let coherence = partition
            .groups
            .iter()
            .map(|g| avg_cos_sim(points, &g.members, &g.centroid))
            .collect();
        Self {
            points,
            groups: partition.groups,
            coherence,
            trace: Vec::new(),
        }
    }

    fn count(&self) -> usize {
        self.groups.len()
    }

    fn min_coherence(&self) -> f64 {
        self.coherence.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn partition(&self) -> GroupPartition {
        GroupPartition {
            groups: self.groups.clone(),
        }
    }

    /// Bisects the least coherent splittable group (lowest index on ties).
    /// The first half keeps the parent's slot, the second is appended.
    fn split_once(&mut self) -> bool {
        let mut pick = None;
        let mut worst = f64::INFINITY;
        for (g, group) in self.groups.iter().enumerate() {
            if group.len() >= 2 && self.coherence[g] < worst {
                worst = self.coherence[g];
                pick = Some(g);
            }
        }
        let Some(g) = pick else {
            return false;
        };
        let (a, b) = binary_split(self.points, &self.groups[g]).expect("group has two members");
        let ca = avg_cos_sim(self.points, &a.members, &a.centroid);
        let cb = avg_cos_sim(self.points, &b.members, &b.centroid);
        self.groups[g] = a;
        self.coherence[g] = ca;
        self.groups.push(b);
        self.coherence.push(cb);
        self.trace.push(SplitStep {
            split_group: g,
            group_count: self.groups.len(),
            min_avg_cos: self.min_coherence(),
        });
        true
    }
}

/// Runs the split phase from an existing partition.
///
/// `threshold = None` means no history yet: split straight to `target`.
/// Otherwise split until the minimum coherence reaches the threshold or the
/// count reaches `max_groups`; if that happens below `target`, keep splitting
/// a copy up to `target` only to record the coherence there.
pub fn split_from(
    points: &EmbeddingMatrix,
    initial: GroupPartition,
    target: usize,
    max_groups: usize,
    threshold: Option<f64>,
    snapshot_sizes: &BTreeSet<usize>,
) -> SplitOutcome {
    let initial_groups = initial.len();
    let initial_objective = initial.objective(points);
    let mut state = SplitState::new(points, initial);
    let mut snapshots = BTreeMap::new();
    let mut recorded = None;

    let capture = |state: &SplitState, snapshots: &mut BTreeMap<usize, GroupPartition>| {
        if snapshot_sizes.contains(&state.count()) {
            snapshots.insert(state.count(), state.partition());
        }
    };
    capture(&state, &mut snapshots);

    let stop = match threshold {
        None => loop {
            if state.count() >= target {
                break StopReason::Target;
            }
            if !state.split_once() {
                break StopReason::Exhausted;
            }
            capture(&state, &mut snapshots);
        },
        Some(thr) => loop {
            if state.count() == target && recorded.is_none() {
                recorded = Some(state.min_coherence());
            }
            if state.min_coherence() >= thr {
                break StopReason::Threshold;
            }
            if state.count() >= max_groups {
                break StopReason::MaxGroups;
            }
            if !state.split_once() {
                break StopReason::Exhausted;
            }
            capture(&state, &mut snapshots);
        },
    };

    let used = state.partition();
    let min_avg_cos_used = state.min_coherence();

    if recorded.is_none() {
        while state.count() < target && state.split_once() {}
        recorded = Some(state.min_coherence());
    }

    SplitOutcome {
        snapshots,
        used,
        stop,
        recorded,
        min_avg_cos_used,
        trace: state.trace,
        initial_groups,
        max_groups,
        initial_objective,
    }
}

/// Full cluster-and-split over the given rows.
///
/// Bounds are clamped to what the rows allow: the initial count to the
/// number of distinct rows, the cap and target to the number of rows.
pub fn cluster_and_split<R: Rng + ?Sized>(
    points: &EmbeddingMatrix,
    params: &AdaptiveParams,
    history: &ThresholdHistory,
    snapshot_sizes: &BTreeSet<usize>,
    rng: &mut R,
) -> Result<SplitOutcome, ClusterError> {
    if points.rows() == 0 {
        return Err(ClusterError::Empty);
    }
    if !(params.alpha > 0.0 && params.alpha < 1.0) {
        return Err(ClusterError::InvalidAlpha(params.alpha));
    }
    let (mut c_i, c_m) = group_bounds(params.target, params.alpha);
    let distinct = distinct_rows(points);
    if c_i > distinct {
        warn!("initial group count {c_i} exceeds {distinct} distinct rows; clamping");
        c_i = distinct;
    }
    let c_m = c_m.min(points.rows()).max(c_i);
    let target = params.target.min(points.rows()).max(c_i);

    let initial = kmeans(points, c_i, rng, params.kmeans_max_iters)?;
    Ok(split_from(
        points,
        initial.partition,
        target,
        c_m,
        history.current(),
        snapshot_sizes,
    ))
}
