//! Top-k sparsification comparator.
//!
//! Each transmitted row keeps its `k` largest-magnitude coordinates and zeroes
//! the rest.

use thiserror::Error;

use crate::actions::{full_matrix_bytes, FLOAT_BYTES};
use crate::model::SparseGradient;

/// Bytes of a column index in the value+index accounting variant.
pub const COLUMN_INDEX_BYTES: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum TopKError {
    #[error("k must lie in 1..={dim}, got {k}")]
    KOutOfRange { k: usize, dim: usize },
    #[error("row {row} is outside the {rows}-row matrix")]
    RowOutOfRange { row: u32, rows: usize },
    #[error("row {row} has column {col} beyond width {dim}")]
    ColumnOutOfRange { row: u32, col: u16, dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKPayload {
    pub k: usize,
    pub dim: usize,
    /// Retained `(column, value)` entries per row, columns ascending.
    pub rows: Vec<(u32, Vec<(u16, f64)>)>,
}

impl TopKPayload {
    pub fn entries(&self) -> usize {
        self.rows.iter().map(|(_, e)| e.len()).sum()
    }

    /// Value-only bytes, the figure compression rates are computed from.
    pub fn value_bytes(&self) -> usize {
        self.entries() * FLOAT_BYTES
    }

    /// Values plus a 2-byte column index per value.
    pub fn value_index_bytes(&self) -> usize {
        self.entries() * (FLOAT_BYTES + COLUMN_INDEX_BYTES)
    }

    pub fn compression_rate(&self, num_rows: usize) -> f64 {
        1.0 - self.value_bytes() as f64 / full_matrix_bytes(num_rows, self.dim) as f64
    }
}

/// Keeps the `k` largest |value| entries of every row; ties keep the lower
/// column.
pub fn topk_encode(gradient: &SparseGradient, k: usize) -> Result<TopKPayload, TopKError> {
    let dim = gradient.dim();
    if k == 0 || k > dim {
        return Err(TopKError::KOutOfRange { k, dim });
    }
    let mut rows = Vec::with_capacity(gradient.len());
    let mut order: Vec<usize> = Vec::with_capacity(dim);
    for (row, values) in gradient.iter() {
        order.clear();
        order.extend(0..dim);
        order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
        let mut kept: Vec<(u16, f64)> = order[..k].iter().map(|&c| (c as u16, values[c])).collect();
        kept.sort_unstable_by_key(|&(c, _)| c);
        rows.push((row, kept));
    }
    Ok(TopKPayload { k, dim, rows })
}

pub fn topk_decode(payload: &TopKPayload, num_rows: usize, dim: usize) -> Result<SparseGradient, TopKError> {
    let mut out = SparseGradient::new(dim);
    for (row, entries) in &payload.rows {
        if *row as usize >= num_rows {
            return Err(TopKError::RowOutOfRange { row: *row, rows: num_rows });
        }
        let mut values = vec![0.0; dim];
        for &(col, v) in entries {
            if col as usize >= dim {
                return Err(TopKError::ColumnOutOfRange { row: *row, col, dim });
            }
            values[col as usize] = v;
        }
        out.insert(*row, values);
    }
    Ok(out)
}

/// Per-row `k` giving the same counted bytes as `N * d * (1 - cr)` floats
/// spread over all `N` rows, clamped to `1..=d`.
pub fn k_for_compression_rate(dim: usize, cr: f64) -> usize {
    crate::clustering::round_half_up(dim as f64 * (1.0 - cr)).clamp(1, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grad(rows: &[(u32, Vec<f64>)]) -> SparseGradient {
        let mut g = SparseGradient::new(rows[0].1.len());
        for (r, v) in rows {
            g.insert(*r, v.clone());
        }
        g
    }

    #[test]
    fn k_equal_to_dim_is_lossless() {
        let g = grad(&[(0, vec![3.0, -5.0, 1.0]), (4, vec![0.5, 0.0, -0.25])]);
        let p = topk_encode(&g, 3).unwrap();
        assert_eq!(topk_decode(&p, 10, 3).unwrap(), g);
    }

    #[test]
    fn keeps_largest_magnitude() {
        let g = grad(&[(0, vec![3.0, -5.0, 1.0])]);
        let p = topk_encode(&g, 1).unwrap();
        assert_eq!(p.rows, vec![(0, vec![(1, -5.0)])]);
        let d = topk_decode(&p, 1, 3).unwrap();
        assert_eq!(d.get(0).unwrap(), &[0.0, -5.0, 0.0]);
    }

    #[test]
    fn ties_keep_lower_column() {
        let g = grad(&[(0, vec![2.0, -2.0, 2.0])]);
        let p = topk_encode(&g, 2).unwrap();
        assert_eq!(p.rows[0].1, vec![(0, 2.0), (1, -2.0)]);
    }

    #[test]
    fn k_range_checked() {
        let g = grad(&[(0, vec![1.0, 2.0])]);
        assert_eq!(topk_encode(&g, 0).unwrap_err(), TopKError::KOutOfRange { k: 0, dim: 2 });
        assert_eq!(topk_encode(&g, 3).unwrap_err(), TopKError::KOutOfRange { k: 3, dim: 2 });
    }

    #[test]
    fn bounds_violations_rejected() {
        let p = TopKPayload {
            k: 1,
            dim: 2,
            rows: vec![(5, vec![(0, 1.0)])],
        };
        assert_eq!(
            topk_decode(&p, 3, 2).unwrap_err(),
            TopKError::RowOutOfRange { row: 5, rows: 3 }
        );
        let p = TopKPayload {
            k: 1,
            dim: 2,
            rows: vec![(0, vec![(4, 1.0)])],
        };
        assert_eq!(
            topk_decode(&p, 3, 2).unwrap_err(),
            TopKError::ColumnOutOfRange { row: 0, col: 4, dim: 2 }
        );
    }

    #[test]
    fn payload_accounting() {
        let mut g = SparseGradient::new(32);
        for r in 0..1682 {
            g.insert(r, vec![1.0; 32]);
        }
        let k = k_for_compression_rate(32, 0.9375);
        assert_eq!(k, 2);
        let p = topk_encode(&g, k).unwrap();
        assert_eq!(p.value_bytes(), 1682 * 2 * 4);
        assert_eq!(p.value_index_bytes(), 1682 * 2 * 6);
        assert!((p.compression_rate(1682) - 0.9375).abs() < 1e-12);
        let d = topk_decode(&p, 1682, 32).unwrap();
        for (_, row) in d.iter() {
            assert_eq!(row.iter().filter(|v| **v == 0.0).count(), 30);
        }
    }

    proptest! {
        #[test]
        fn kept_set_matches_sort_oracle(seed in any::<u64>(), dim in 1usize..12, k in 1usize..12) {
            let k = k.min(dim);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = grad(&[(0, row.clone())]);
            let p = topk_encode(&g, k).unwrap();

            let mut ranked: Vec<(f64, usize)> = row.iter().enumerate().map(|(c, v)| (v.abs(), c)).collect();
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut expected: Vec<usize> = ranked[..k].iter().map(|&(_, c)| c).collect();
            expected.sort_unstable();
            let got: Vec<usize> = p.rows[0].1.iter().map(|&(c, _)| c as usize).collect();
            prop_assert_eq!(got, expected);
        }
    }
}
