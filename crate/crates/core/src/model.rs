//! Matrix-factorization scorer with analytic BCE gradients and local SGD.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{sample_training_batch, InteractionDataset};

/// Predictions are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Logits beyond this magnitude saturate the sigmoid.
const LOGIT_CLAMP: f64 = 500.0;

/// Default embedding width.
pub const DEFAULT_DIM: usize = 32;

/// Standard deviation of the normal used for embedding initialization.
pub const INIT_STD: f64 = 0.01;

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * dim, "data length must equal rows * dim");
        Self { rows, dim, data }
    }

    /// Builds a matrix whose rows are the given vectors.
    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), dim, "row width mismatch");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            dim,
            data,
        }
    }

    /// I.i.d. normal(0, std) entries.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * dim).map(|_| normal.sample(rng)).collect();
        Self { rows, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds every row of `delta` to the matching row of `self`.
    pub fn add_sparse(&mut self, delta: &SparseGradient) {
        assert_eq!(delta.dim(), self.dim, "dimension mismatch");
        for (row, values) in delta.iter() {
            for (q, d) in self.row_mut(row as usize).iter_mut().zip(values) {
                *q += d;
            }
        }
    }
}

/// Row-indexed set of non-zero delta vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseGradient {
    dim: usize,
    rows: BTreeMap<u32, Vec<f64>>,
}

impl SparseGradient {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Stores `values` for `row`; an all-zero vector removes the row instead.
    pub fn insert(&mut self, row: u32, values: Vec<f64>) {
        assert_eq!(values.len(), self.dim, "row width mismatch");
        if values.iter().all(|v| *v == 0.0) {
            self.rows.remove(&row);
        } else {
            self.rows.insert(row, values);
        }
    }

    pub fn get(&self, row: u32) -> Option<&[f64]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    /// Rows in ascending index order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f64])> + '_ {
        self.rows.iter().map(|(&r, v)| (r, v.as_slice()))
    }

    pub fn indices(&self) -> Vec<u32> {
        self.rows.keys().copied().collect()
    }

    pub fn max_index(&self) -> Option<u32> {
        self.rows.keys().next_back().copied()
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|v| v.is_finite())
    }

    /// Row indices and a dense matrix of the stored rows, in index order.
    pub fn to_points(&self) -> (Vec<u32>, EmbeddingMatrix) {
        let idx = self.indices();
        let rows: Vec<&[f64]> = self.rows.values().map(Vec::as_slice).collect();
        (idx, EmbeddingMatrix::from_rows(self.dim, &rows))
    }

    pub fn to_dense(&self, num_rows: usize) -> EmbeddingMatrix {
        let mut m = EmbeddingMatrix::zeros(num_rows, self.dim);
        m.add_sparse(self);
        m
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probability that the user interacts with the item: `sigmoid(p . q)`.
pub fn predict(user: &[f64], item: &[f64]) -> f64 {
    sigmoid(dot(user, item))
}

/// Binary cross-entropy of a prediction against a 0/1 label.
pub fn bce_loss(prediction: f64, label: f64) -> f64 {
    let p = prediction.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Gradients of `bce_loss(predict(p, q), r)` with respect to `p` and `q`.
///
/// The logit derivative is `sigmoid(p . q) - r`, so the gradients are that
/// scalar times `q` and `p` respectively.
pub fn bce_gradients(user: &[f64], item: &[f64], label: f64) -> (Vec<f64>, Vec<f64>) {
    let g = predict(user, item) - label;
    (
        item.iter().map(|q| g * q).collect(),
        user.iter().map(|p| g * p).collect(),
    )
}

/// How per-sample losses in a mini-batch are combined before stepping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Batch loss is the mean of per-sample losses.
    Mean,
    /// Batch loss is the sum of per-sample losses.
    #[default]
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub neg_ratio: usize,
    pub lr: f64,
    pub reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 2,
            batch_size: 256,
            neg_ratio: 4,
            lr: 0.05,
            reduction: LossReduction::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("user {user}: non-finite {what} in epoch {epoch}, batch {batch} (learning rate too high?)")]
    NonFinite {
        user: usize,
        epoch: usize,
        batch: usize,
        what: &'static str,
    },
    #[error("item matrix has width {found}, user embedding has width {expected}")]
    DimMismatch { expected: usize, found: usize },
}

/// Output of one client's local optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainResult {
    /// Trained item rows minus the rows the client started from.
    pub item_delta: SparseGradient,
    /// Shared scoring parameters after training (empty for MF).
    pub scoring_params: Vec<f64>,
    /// Stays on the client; never part of any payload.
    pub user_embedding: Vec<f64>,
    /// Mean per-sample loss over the last local epoch.
    pub last_epoch_loss: f64,
    /// Every item that appeared in a sampled batch.
    pub touched_items: Vec<u32>,
}

/// Runs `local_epochs` passes of mini-batch SGD for one user.
///
/// Each epoch draws fresh negatives, shuffles, and steps on consecutive
/// batches. Gradients inside a batch are evaluated at the parameters from the
/// start of the batch. `item_view` is the client's current copy of the item
/// matrix and is not modified.
pub fn local_train<R: Rng + ?Sized>(
    dataset: &InteractionDataset,
    user: usize,
    item_view: &EmbeddingMatrix,
    user_embedding: &[f64],
    scoring_params: &[f64],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LocalTrainResult, TrainError> {
    let dim = item_view.dim();
    if user_embedding.len() != dim {
        return Err(TrainError::DimMismatch {
            expected: user_embedding.len(),
            found: dim,
        });
    }

    let mut p = user_embedding.to_vec();
    let mut local: HashMap<u32, Vec<f64>> = HashMap::new();
    let mut last_epoch_loss = 0.0;
    let batch_size = cfg.batch_size.max(1);

    for epoch in 0..cfg.local_epochs {
        let mut samples = sample_training_batch(dataset, user, cfg.neg_ratio, rng);
        samples.shuffle(rng);
        let mut epoch_loss = 0.0;

        for (b, batch) in samples.chunks(batch_size).enumerate() {
            let scale = match cfg.reduction {
                LossReduction::Mean => 1.0 / batch.len() as f64,
                LossReduction::Sum => 1.0,
            };
            let mut grad_p = vec![0.0; dim];
            let mut item_grads: Vec<(u32, Vec<f64>)> = Vec::new();
            let mut slot: HashMap<u32, usize> = HashMap::new();

            for &(item, label) in batch {
                let q = local
                    .entry(item)
                    .or_insert_with(|| item_view.row(item as usize).to_vec());
                let z = dot(&p, q);
                let pred = sigmoid(z);
                epoch_loss += bce_loss(pred, label);
                let g = (pred - label) * scale;
                for (gp, qk) in grad_p.iter_mut().zip(q.iter()) {
                    *gp += g * qk;
                }
                let k = *slot.entry(item).or_insert_with(|| {
                    item_grads.push((item, vec![0.0; dim]));
                    item_grads.len() - 1
                });
                for (gq, pk) in item_grads[k].1.iter_mut().zip(&p) {
                    *gq += g * pk;
                }
            }

            if !epoch_loss.is_finite() {
                return Err(TrainError::NonFinite {
                    user,
                    epoch,
                    batch: b,
                    what: "loss",
                });
            }
            if grad_p.iter().any(|v| !v.is_finite())
                || item_grads.iter().flat_map(|(_, g)| g).any(|v| !v.is_finite())
            {
                return Err(TrainError::NonFinite {
                    user,
                    epoch,
                    batch: b,
                    what: "gradient",
                });
            }

            for (pk, gk) in p.iter_mut().zip(&grad_p) {
                *pk -= cfg.lr * gk;
            }
            for (item, g) in &item_grads {
                let q = local.get_mut(item).expect("touched rows are cached");
                for (qk, gk) in q.iter_mut().zip(g) {
                    *qk -= cfg.lr * gk;
                }
            }
        }
        last_epoch_loss = if samples.is_empty() {
            0.0
        } else {
            epoch_loss / samples.len() as f64
        };
    }

    let mut touched: Vec<u32> = local.keys().copied().collect();
    touched.sort_unstable();
    let mut item_delta = SparseGradient::new(dim);
    for &item in &touched {
        let trained = &local[&item];
        let base = item_view.row(item as usize);
        let delta: Vec<f64> = trained.iter().zip(base).map(|(a, b)| a - b).collect();
        item_delta.insert(item, delta);
    }
    if !item_delta.is_finite() || p.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFinite {
            user,
            epoch: cfg.local_epochs.saturating_sub(1),
            batch: 0,
            what: "parameters",
        });
    }

    Ok(LocalTrainResult {
        item_delta,
        scoring_params: scoring_params.to_vec(),
        user_embedding: p,
        last_epoch_loss,
        touched_items: touched,
    })
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file or unsupported version")]
    BadHeader,
    #[error("checkpoint truncated or has trailing bytes")]
    BadLength,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FRCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Item matrix plus per-user embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub items: EmbeddingMatrix,
    pub users: EmbeddingMatrix,
}

impl Checkpoint {
    /// Layout: magic, version (u32), then for items and users in turn
    /// rows (u64), dim (u64), row-major little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for m in [&self.items, &self.users] {
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.dim() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadHeader);
        }
        if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadHeader);
        }
        let mut cursor = &bytes[8..];
        let mut read_matrix = || -> Result<EmbeddingMatrix, CheckpointError> {
            let mut u = [0u8; 8];
            cursor.read_exact(&mut u).map_err(|_| CheckpointError::BadLength)?;
            let rows = u64::from_le_bytes(u) as usize;
            cursor.read_exact(&mut u).map_err(|_| CheckpointError::BadLength)?;
            let dim = u64::from_le_bytes(u) as usize;
            let count = rows.checked_mul(dim).ok_or(CheckpointError::BadLength)?;
            if cursor.len() < count * 8 {
                return Err(CheckpointError::BadLength);
            }
            let data = cursor[..count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cursor = &cursor[count * 8..];
            Ok(EmbeddingMatrix::from_vec(rows, dim, data))
        };
        let items = read_matrix()?;
        let users = read_matrix()?;
        if !cursor.is_empty() {
            return Err(CheckpointError::BadLength);
        }
        Ok(Self { items, users })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn predict_closed_forms() {
        assert_eq!(predict(&[0.0; 4], &[0.0; 4]), 0.5);
        let z = 3f64.ln();
        assert!(approx(predict(&[z, 0.0], &[1.0, 7.0]), 0.75, 1e-15));
        assert!(predict(&[1e6], &[1e6]).is_finite());
        assert!(predict(&[-1e6], &[1e6]).is_finite());
    }

    #[test]
    fn predict_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut s = 0.0;
            for k in 0..32 {
                s += p[k] * q[k];
            }
            let expected = 1.0 / (1.0 + (-s).exp());
            assert!(approx(predict(&p, &q), expected, 1e-12));
        }
    }

    #[test]
    fn bce_values() {
        assert!(approx(bce_loss(0.5, 1.0), 2f64.ln(), 1e-15));
        assert!(bce_loss(1.0 - BCE_EPS, 1.0) < 2.0 * BCE_EPS);
        assert!(approx(bce_loss(0.75, 0.0), -(0.25f64).ln(), 1e-12));
        assert!(approx(bce_loss(0.75, 0.0), 1.3862943611198906, 1e-12));
        assert!(bce_loss(0.0, 1.0).is_finite());
        assert!(bce_loss(1.0, 0.0).is_finite());
    }

    fn fd_loss(p: &[f64], q: &[f64], r: f64) -> f64 {
        bce_loss(predict(p, q), r)
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    /// Central finite differences of the loss in each coordinate.
    fn central_fd(p: &[f64], q: &[f64], r: f64, h: f64) -> (Vec<f64>, Vec<f64>) {
        let mut gp = vec![0.0; p.len()];
        let mut gq = vec![0.0; q.len()];
        for k in 0..p.len() {
            let (mut a, mut b) = (p.to_vec(), p.to_vec());
            a[k] += h;
            b[k] -= h;
            gp[k] = (fd_loss(&a, q, r) - fd_loss(&b, q, r)) / (2.0 * h);
        }
        for k in 0..q.len() {
            let (mut a, mut b) = (q.to_vec(), q.to_vec());
            a[k] += h;
            b[k] -= h;
            gq[k] = (fd_loss(p, &a, r) - fd_loss(p, &b, r)) / (2.0 * h);
        }
        (gp, gq)
    }

    proptest! {
        #[test]
        fn analytic_gradients_match_finite_differences(
            p in prop::collection::vec(-1.0f64..1.0, 8),
            q in prop::collection::vec(-1.0f64..1.0, 8),
            positive in any::<bool>(),
        ) {
            let r = if positive { 1.0 } else { 0.0 };
            let (gp, gq) = bce_gradients(&p, &q, r);
            let (fp, fq) = central_fd(&p, &q, r, 1e-6);
            prop_assert!(rel_err(&gp, &fp) < 1e-5);
            prop_assert!(rel_err(&gq, &fq) < 1e-5);
        }
    }

    fn one_user(num_items: usize, train: Vec<u32>) -> InteractionDataset {
        InteractionDataset {
            num_users: 1,
            num_items,
            train: vec![train],
            test_item: vec![(num_items - 1) as u32],
            eval_negatives: vec![vec![]],
            user_ids: vec![0],
            item_ids: (0..num_items as u64).collect(),
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let ds = one_user(20, vec![1, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = EmbeddingMatrix::random_normal(20, 4, 0.1, &mut rng);
        let p = vec![0.1, -0.2, 0.3, 0.05];
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let res = local_train(&ds, 0, &q, &p, &[], &cfg, &mut rng).unwrap();
        assert!(res.item_delta.is_empty());
        assert_eq!(res.user_embedding, p);
        assert!(res.scoring_params.is_empty());
    }

    #[test]
    fn single_step_matches_finite_difference_gradient() {
        let ds = one_user(10, vec![4]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = EmbeddingMatrix::random_normal(10, 6, 0.3, &mut rng);
        let p: Vec<f64> = (0..6).map(|k| 0.1 * k as f64 - 0.2).collect();
        let lr = 0.05;
        let cfg = TrainConfig {
            local_epochs: 1,
            batch_size: 8,
            neg_ratio: 0,
            lr,
            reduction: LossReduction::Mean,
        };
        let res = local_train(&ds, 0, &q, &p, &[], &cfg, &mut rng).unwrap();
        assert_eq!(res.item_delta.indices(), vec![4]);
        let (_, fq) = central_fd(&p, q.row(4), 1.0, 1e-6);
        let expected: Vec<f64> = fq.iter().map(|g| -lr * g).collect();
        assert!(rel_err(res.item_delta.get(4).unwrap(), &expected) < 1e-5);
    }

    #[test]
    fn delta_rows_are_subset_of_touched_items() {
        let ds = one_user(200, (0..20).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = EmbeddingMatrix::random_normal(200, 8, 0.1, &mut rng);
        let p = vec![0.05; 8];
        let res = local_train(&ds, 0, &q, &p, &[], &TrainConfig::default(), &mut rng).unwrap();
        for idx in res.item_delta.indices() {
            assert!(res.touched_items.binary_search(&idx).is_ok());
        }
        assert!(!res.item_delta.is_empty());
    }

    #[test]
    fn identical_inputs_give_identical_results() {
        let ds = one_user(100, (0..15).collect());
        let q = EmbeddingMatrix::random_normal(100, 8, 0.1, &mut ChaCha8Rng::seed_from_u64(0));
        let p = vec![0.02; 8];
        let cfg = TrainConfig::default();
        let a = local_train(&ds, 0, &q, &p, &[], &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = local_train(&ds, 0, &q, &p, &[], &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = 30;
            let ds = one_user(n, vec![2, 5, 7]);
            let q = EmbeddingMatrix::random_normal(n, 5, 0.5, &mut rng);
            let p: Vec<f64> = (0..5).map(|_| rng.random_range(-0.5..0.5)).collect();
            let cfg = TrainConfig {
                local_epochs: 1,
                batch_size: 64,
                neg_ratio: 0,
                lr: 1e-3,
                reduction: LossReduction::Mean,
            };
            let before: f64 = ds.train[0]
                .iter()
                .map(|&i| bce_loss(predict(&p, q.row(i as usize)), 1.0))
                .sum();
            let res = local_train(&ds, 0, &q, &p, &[], &cfg, &mut rng).unwrap();
            let mut q2 = q.clone();
            q2.add_sparse(&res.item_delta);
            let after: f64 = ds.train[0]
                .iter()
                .map(|&i| bce_loss(predict(&res.user_embedding, q2.row(i as usize)), 1.0))
                .sum();
            assert!(after < before, "{after} !< {before}");
        }
    }

    #[test]
    fn exploding_learning_rate_is_reported() {
        let ds = one_user(50, (0..10).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = EmbeddingMatrix::random_normal(50, 4, 1.0, &mut rng);
        let p = vec![1.0; 4];
        let cfg = TrainConfig {
            lr: 1e300,
            ..TrainConfig::default()
        };
        let err = local_train(&ds, 0, &q, &p, &[], &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { user: 0, .. }));
    }

    #[test]
    fn sparse_gradient_drops_zero_rows() {
        let mut g = SparseGradient::new(2);
        g.insert(3, vec![0.0, 0.0]);
        assert!(g.is_empty());
        g.insert(3, vec![1.0, 0.0]);
        g.insert(1, vec![0.0, -1.0]);
        assert_eq!(g.indices(), vec![1, 3]);
        g.insert(3, vec![0.0, 0.0]);
        assert_eq!(g.indices(), vec![1]);
    }

    proptest! {
        #[test]
        fn checkpoint_round_trips_bit_exactly(
            items in prop::collection::vec(any::<f64>(), 12),
            users in prop::collection::vec(any::<f64>(), 6),
        ) {
            let ck = Checkpoint {
                items: EmbeddingMatrix::from_vec(4, 3, items),
                users: EmbeddingMatrix::from_vec(2, 3, users),
            };
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(bytes, back.to_bytes());
        }
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let ck = Checkpoint {
            items: EmbeddingMatrix::zeros(2, 2),
            users: EmbeddingMatrix::zeros(1, 2),
        };
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::BadLength)
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadHeader)));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::BadLength)));
    }
}
