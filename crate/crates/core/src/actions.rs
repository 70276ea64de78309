//! Action sets: shared centroid updates plus per-row group indices.
//!
//! An [`ActionSet`] replaces every row of a sparse gradient with the centroid
//! of the group it was clustered into. Only centroid floats count towards the
//! payload size; the index map is reported separately.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::clustering::GroupPartition;
use crate::model::SparseGradient;

/// Bytes per transmitted float.
pub const FLOAT_BYTES: usize = 4;

const WIRE_MAGIC: &[u8; 4] = b"FRAS";
const WIRE_VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum PayloadError {
    #[error("row {row} references group {group}, but only {groups} groups were sent")]
    GroupOutOfRange { row: u32, group: u32, groups: usize },
    #[error("row {row} is outside the {rows}-row item matrix")]
    RowOutOfRange { row: u32, rows: usize },
    #[error("row {0} is assigned more than once")]
    DuplicateRow(u32),
    #[error("payload truncated: {0}")]
    Truncated(&'static str),
    #[error("bad magic or unsupported version")]
    BadHeader,
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("action set must carry at least one centroid")]
    NoCentroids,
}

/// Centroids plus the group index of every transmitted row.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSet {
    pub round_id: u32,
    pub dim: usize,
    /// `K x dim`, row-major.
    pub centroids: Vec<f64>,
    /// `(row, group)` pairs in ascending row order.
    pub assignment: Vec<(u32, u32)>,
}

impl ActionSet {
    pub fn num_actions(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.centroids.len() / self.dim
        }
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    /// Serializes to the wire layout: magic, version (u16), round (u32),
    /// K (u32), d (u16), count (u32), `K * d` f32 centroid values, then
    /// `count` (row u32, group u32) pairs. Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.num_actions();
        let mut out = Vec::with_capacity(20 + k * self.dim * 4 + self.assignment.len() * 8);
        out.extend_from_slice(WIRE_MAGIC);
        out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.round_id.to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u16).to_le_bytes());
        out.extend_from_slice(&(self.assignment.len() as u32).to_le_bytes());
        for v in &self.centroids {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for &(row, group) in &self.assignment {
            out.extend_from_slice(&row.to_le_bytes());
            out.extend_from_slice(&group.to_le_bytes());
        }
        out
    }

    /// Parses the wire layout. Centroids come back widened from f32. Group
    /// indices are checked against K; row bounds are checked by [`decode`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != WIRE_MAGIC {
            return Err(PayloadError::BadHeader);
        }
        if cur.u16("version")? != WIRE_VERSION {
            return Err(PayloadError::BadHeader);
        }
        let round_id = cur.u32("round id")?;
        let k = cur.u32("action count")? as usize;
        let dim = cur.u16("dimension")? as usize;
        let count = cur.u32("assignment count")? as usize;
        let values = k.checked_mul(dim).ok_or(PayloadError::Truncated("centroids"))?;
        let raw = cur.take(values * 4, "centroids")?;
        let centroids = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let raw = cur.take(count * 8, "assignment")?;
        let mut assignment = Vec::with_capacity(count);
        for pair in raw.chunks_exact(8) {
            let row = u32::from_le_bytes(pair[..4].try_into().unwrap());
            let group = u32::from_le_bytes(pair[4..].try_into().unwrap());
            if group as usize >= k {
                return Err(PayloadError::GroupOutOfRange { row, group, groups: k });
            }
            assignment.push((row, group));
        }
        if cur.pos != bytes.len() {
            return Err(PayloadError::Trailing(bytes.len() - cur.pos));
        }
        Ok(Self {
            round_id,
            dim,
            centroids,
            assignment,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], PayloadError> {
        let end = self.pos.checked_add(n).ok_or(PayloadError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(PayloadError::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, PayloadError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, PayloadError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Turns a partition of gradient rows into an action set.
///
/// `row_ids[i]` is the item row of point `i` in the partition.
pub fn encode(partition: &GroupPartition, row_ids: &[u32], round_id: u32) -> ActionSet {
    let dim = partition
        .groups
        .first()
        .map(|g| g.centroid.len())
        .unwrap_or(0);
    let mut centroids = Vec::with_capacity(partition.len() * dim);
    let mut assignment = Vec::with_capacity(row_ids.len());
    for (k, group) in partition.groups.iter().enumerate() {
        centroids.extend_from_slice(&group.centroid);
        for &m in &group.members {
            assignment.push((row_ids[m], k as u32));
        }
    }
    assignment.sort_unstable();
    ActionSet {
        round_id,
        dim,
        centroids,
        assignment,
    }
}

/// Rebuilds the sparse gradient an action set stands for. Rows whose
/// centroid is all zeros are left out.
pub fn decode(actions: &ActionSet, num_rows: usize) -> Result<SparseGradient, PayloadError> {
    let k = actions.num_actions();
    let mut out = SparseGradient::new(actions.dim);
    let mut last: Option<u32> = None;
    for &(row, group) in &actions.assignment {
        if group as usize >= k {
            return Err(PayloadError::GroupOutOfRange {
                row,
                group,
                groups: k,
            });
        }
        if row as usize >= num_rows {
            return Err(PayloadError::RowOutOfRange { row, rows: num_rows });
        }
        if last.is_some_and(|l| l >= row) {
            return Err(PayloadError::DuplicateRow(row));
        }
        last = Some(row);
        out.insert(row, actions.centroid(group as usize).to_vec());
    }
    Ok(out)
}

/// Payload size accounting for one transmitted message.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayloadReport {
    pub centroid_bytes: usize,
    /// Indices at `ceil(log2 K)` bits each; excluded from `counted_bytes`.
    pub index_bytes: usize,
    pub counted_bytes: usize,
    /// `1 - counted_bytes / (N * d * 4)`.
    pub compression_rate: f64,
}

/// Bytes of a full `num_rows x dim` float matrix.
pub fn full_matrix_bytes(num_rows: usize, dim: usize) -> usize {
    num_rows * dim * FLOAT_BYTES
}

fn bits_for(k: usize) -> usize {
    if k <= 1 {
        0
    } else {
        (usize::BITS - (k - 1).leading_zeros()) as usize
    }
}

pub fn report_for(counted_bytes: usize, index_bytes: usize, num_rows: usize, dim: usize) -> PayloadReport {
    PayloadReport {
        centroid_bytes: counted_bytes,
        index_bytes,
        counted_bytes,
        compression_rate: 1.0 - counted_bytes as f64 / full_matrix_bytes(num_rows, dim) as f64,
    }
}

pub fn measure_payload(actions: &ActionSet, num_rows: usize, dim: usize) -> PayloadReport {
    let k = actions.num_actions();
    let centroid_bytes = k * dim * FLOAT_BYTES;
    let index_bytes = (actions.assignment.len() * bits_for(k)).div_ceil(8);
    report_for(centroid_bytes, index_bytes, num_rows, dim)
}

/// Payload of an uncompressed upload of `rows` gradient rows.
pub fn measure_raw(rows: usize, num_rows: usize, dim: usize) -> PayloadReport {
    report_for(rows * dim * FLOAT_BYTES, 0, num_rows, dim)
}

/// Wraps each row of a gradient in its own group, losslessly.
pub fn identity_actions(gradient: &SparseGradient, round_id: u32) -> ActionSet {
    let dim = gradient.dim();
    let mut centroids = Vec::with_capacity(gradient.len() * dim);
    let mut assignment = Vec::with_capacity(gradient.len());
    for (k, (row, values)) in gradient.iter().enumerate() {
        centroids.extend_from_slice(values);
        assignment.push((row, k as u32));
    }
    ActionSet {
        round_id,
        dim,
        centroids,
        assignment,
    }
}

/// Group sizes keyed by group index, for diagnostics.
pub fn group_sizes(actions: &ActionSet) -> BTreeMap<u32, usize> {
    let mut sizes = BTreeMap::new();
    for &(_, g) in &actions.assignment {
        *sizes.entry(g).or_default() += 1;
    }
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{kmeans, mean_of, Group};
    use crate::model::EmbeddingMatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn singletons_round_trip_exactly() {
        let p = EmbeddingMatrix::from_rows(2, &[[1.5, -2.0], [0.25, 3.0], [7.0, 0.125]]);
        let part = GroupPartition {
            groups: (0..3).map(|i| Group::from_members(&p, vec![i])).collect(),
        };
        let rows = [4u32, 9, 11];
        let a = encode(&part, &rows, 0);
        let g = decode(&a, 20).unwrap();
        for (i, &r) in rows.iter().enumerate() {
            assert_eq!(g.get(r).unwrap(), p.row(i));
        }
    }

    #[test]
    fn shared_group_decodes_to_centroid() {
        let p = EmbeddingMatrix::from_rows(2, &[[1.0, 0.0], [0.0, 1.0]]);
        let part = GroupPartition {
            groups: vec![Group::from_members(&p, vec![0, 1])],
        };
        let a = encode(&part, &[0, 1], 3);
        let g = decode(&a, 2).unwrap();
        assert_eq!(g.get(0).unwrap(), &[0.5, 0.5]);
        assert_eq!(g.get(1).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn decode_matches_recomputed_group_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = EmbeddingMatrix::random_normal(20, 5, 1.0, &mut rng);
        let rows: Vec<u32> = (0..20).map(|i| 3 * i + 1).collect();
        let km = kmeans(&p, 4, &mut rng, 100).unwrap();
        let g = decode(&encode(&km.partition, &rows, 0), 100).unwrap();
        let labels = km.partition.labels(20);
        for i in 0..20 {
            let members: Vec<usize> = (0..20).filter(|&j| labels[j] == labels[i]).collect();
            let mean = mean_of(&p, &members);
            let got = g.get(rows[i]).unwrap();
            for (a, b) in got.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_assignment_decodes_to_empty() {
        let a = ActionSet {
            round_id: 0,
            dim: 2,
            centroids: vec![1.0, 1.0],
            assignment: vec![],
        };
        assert!(decode(&a, 5).unwrap().is_empty());
    }

    #[test]
    fn corrupt_payloads_are_rejected() {
        let a = ActionSet {
            round_id: 0,
            dim: 1,
            centroids: vec![1.0, 2.0, 3.0, 4.0],
            assignment: vec![(0, 7)],
        };
        assert_eq!(
            decode(&a, 10).unwrap_err(),
            PayloadError::GroupOutOfRange {
                row: 0,
                group: 7,
                groups: 4
            }
        );
        assert!(matches!(
            ActionSet::from_bytes(&a.to_bytes()),
            Err(PayloadError::GroupOutOfRange { group: 7, .. })
        ));

        let a = ActionSet {
            assignment: vec![(12, 1)],
            ..a
        };
        assert_eq!(
            decode(&a, 10).unwrap_err(),
            PayloadError::RowOutOfRange { row: 12, rows: 10 }
        );

        let a = ActionSet {
            assignment: vec![(2, 1), (2, 0)],
            ..a
        };
        assert_eq!(decode(&a, 10).unwrap_err(), PayloadError::DuplicateRow(2));

        let bytes = a.to_bytes();
        assert!(matches!(
            ActionSet::from_bytes(&bytes[..bytes.len() - 3]),
            Err(PayloadError::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(ActionSet::from_bytes(&bad).unwrap_err(), PayloadError::BadHeader);
        let mut long = bytes;
        long.push(0);
        assert_eq!(ActionSet::from_bytes(&long).unwrap_err(), PayloadError::Trailing(1));
    }

    #[test]
    fn accounting_at_paper_scale() {
        let a = ActionSet {
            round_id: 0,
            dim: 32,
            centroids: vec![0.0; 105 * 32],
            assignment: (0..1682u32).map(|r| (r, r % 105)).collect(),
        };
        let rep = measure_payload(&a, 1682, 32);
        assert_eq!(rep.counted_bytes, 13440);
        assert_eq!(rep.centroid_bytes, 13440);
        // 7 bits per index for K = 105
        assert_eq!(rep.index_bytes, (1682usize * 7).div_ceil(8));
        assert!((rep.compression_rate - (1.0 - 105.0 / 1682.0)).abs() < 1e-12);
        assert!((rep.compression_rate - 0.9376).abs() < 1e-4);
    }

    #[test]
    fn identity_has_zero_compression() {
        let mut g = SparseGradient::new(4);
        for r in 0..10 {
            g.insert(r, vec![r as f64 + 1.0; 4]);
        }
        let a = identity_actions(&g, 0);
        assert_eq!(measure_payload(&a, 10, 4).compression_rate, 0.0);
        assert_eq!(decode(&a, 10).unwrap(), g);
    }

    #[test]
    fn full_gradient_size_cross_check() {
        // 12454 items x 64 dims x 4 bytes is about 3.04 MiB
        let mib = full_matrix_bytes(12454, 64) as f64 / (1024.0 * 1024.0);
        assert!((mib - 3.04).abs() < 0.005, "{mib}");
        let mib = full_matrix_bytes(12399, 64) as f64 / (1024.0 * 1024.0);
        assert!((mib - 3.04).abs() < 0.02, "{mib}");
    }

    #[test]
    fn counted_bytes_shrink_with_k() {
        let mut last = usize::MAX;
        for k in (1..=50).rev() {
            let a = ActionSet {
                round_id: 0,
                dim: 8,
                centroids: vec![0.0; k * 8],
                assignment: vec![],
            };
            let b = measure_payload(&a, 100, 8).counted_bytes;
            assert!(b < last);
            last = b;
        }
    }

    proptest! {
        #[test]
        fn wire_round_trip(
            k in 1usize..6,
            dim in 1usize..5,
            seed in any::<u64>(),
            rows in prop::collection::btree_set(0u32..500, 0..40),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let centroids = EmbeddingMatrix::random_normal(k, dim, 1.0, &mut rng).as_slice().to_vec();
            let assignment: Vec<(u32, u32)> = rows.iter().map(|&r| (r, r % k as u32)).collect();
            let a = ActionSet { round_id: seed as u32, dim, centroids, assignment };
            let bytes = a.to_bytes();
            let back = ActionSet::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back.to_bytes(), &bytes);
            prop_assert_eq!(&back.assignment, &a.assignment);
            for (x, y) in back.centroids.iter().zip(&a.centroids) {
                prop_assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-30));
            }
        }

        #[test]
        fn lossless_when_k_is_distinct_rows(seed in any::<u64>(), n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = EmbeddingMatrix::random_normal(n, 3, 1.0, &mut rng);
            let km = kmeans(&p, n, &mut rng, 100).unwrap();
            let rows: Vec<u32> = (0..n as u32).collect();
            let g = decode(&encode(&km.partition, &rows, 0), n).unwrap();
            for i in 0..n {
                prop_assert_eq!(g.get(i as u32).unwrap(), p.row(i));
            }
        }

        #[test]
        fn decode_encode_is_idempotent(seed in any::<u64>(), n in 2usize..30, k in 1usize..6) {
            let k = k.min(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = EmbeddingMatrix::random_normal(n, 3, 1.0, &mut rng);
            let km = kmeans(&p, k, &mut rng, 100).unwrap();
            let rows: Vec<u32> = (0..n as u32).collect();
            let once = decode(&encode(&km.partition, &rows, 0), n).unwrap();
            let twice = decode(&identity_actions(&once, 0), n).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
