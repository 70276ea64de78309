//! Leave-one-out ranking metrics and compression information-loss probes.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionDataset;
use crate::federation::aggregate_item_gradients;
use crate::model::{dot, EmbeddingMatrix, SparseGradient};

pub const DEFAULT_K: usize = 10;

/// Candidate set used when ranking a user's held-out item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum EvalMode {
    /// Held-out item against the user's fixed sampled negatives.
    #[default]
    #[serde(rename = "sampled_99")]
    Sampled,
    /// Held-out item against every item outside the user's training set.
    #[serde(rename = "full_set")]
    FullSet,
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sampled_99" | "sampled" => Ok(Self::Sampled),
            "full_set" | "full" => Ok(Self::FullSet),
            other => Err(format!("unknown eval mode `{other}` (expected sampled_99 or full_set)")),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sampled => "sampled_99",
            Self::FullSet => "full_set",
        })
    }
}

/// Which copy of the item matrix a user is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    /// The server's global item matrix.
    #[default]
    Server,
    /// The item matrix the user's own device holds after its downlinks.
    Client,
}

impl FromStr for EvalModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "server" => Ok(Self::Server),
            "client" => Ok(Self::Client),
            other => Err(format!("unknown eval model `{other}` (expected server or client)")),
        }
    }
}

impl fmt::Display for EvalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Server => "server",
            Self::Client => "client",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub k: usize,
    pub mode: EvalMode,
}

/// 1-based rank of `target` among `candidates`; ties rank the lower item id
/// first. `candidates` must include `target`.
pub fn rank_of(target: u32, candidates: impl IntoIterator<Item = (u32, f64)>, target_score: f64) -> usize {
    1 + candidates
        .into_iter()
        .filter(|&(item, s)| item != target && (s > target_score || (s == target_score && item < target)))
        .count()
}

/// Hit and NDCG contributions of a single held-out item at `rank`.
pub fn hit_and_ndcg(rank: usize, k: usize) -> (f64, f64) {
    if rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

/// Per-user rank of the held-out item under an arbitrary scoring function.
pub fn user_ranks<F>(dataset: &InteractionDataset, mode: EvalMode, score: F) -> Vec<usize>
where
    F: Fn(usize, u32) -> f64 + Sync,
{
    (0..dataset.num_users)
        .into_par_iter()
        .map(|u| {
            let target = dataset.test_item[u];
            let target_score = score(u, target);
            match mode {
                EvalMode::Sampled => rank_of(
                    target,
                    dataset.eval_negatives[u].iter().map(|&i| (i, score(u, i))),
                    target_score,
                ),
                EvalMode::FullSet => rank_of(
                    target,
                    (0..dataset.num_items as u32)
                        .filter(|&i| !dataset.is_train_positive(u, i))
                        .map(|i| (i, score(u, i))),
                    target_score,
                ),
            }
        })
        .collect()
}

pub fn evaluate_with<F>(dataset: &InteractionDataset, k: usize, mode: EvalMode, score: F) -> RankingResult
where
    F: Fn(usize, u32) -> f64 + Sync,
{
    let ranks = user_ranks(dataset, mode, score);
    let (mut hr, mut ndcg) = (0.0, 0.0);
    for &r in &ranks {
        let (h, n) = hit_and_ndcg(r, k);
        hr += h;
        ndcg += n;
    }
    let users = ranks.len().max(1) as f64;
    RankingResult {
        hr_at_k: hr / users,
        ndcg_at_k: ndcg / users,
        k,
        mode,
    }
}

/// HR@k and NDCG@k of the global item matrix combined with each user's own
/// embedding. Scores are raw dot products, which rank identically to the
/// sigmoid predictions.
pub fn evaluate(
    items: &EmbeddingMatrix,
    users: &EmbeddingMatrix,
    dataset: &InteractionDataset,
    k: usize,
    mode: EvalMode,
) -> RankingResult {
    assert_eq!(items.rows(), dataset.num_items, "item matrix must cover all items");
    assert_eq!(users.rows(), dataset.num_users, "one embedding per user");
    evaluate_with(dataset, k, mode, |u, i| dot(users.row(u), items.row(i as usize)))
}

/// Mean squared error over every entry of two `num_rows x dim` matrices given
/// sparsely (absent rows are zero).
pub fn sparse_mse(a: &SparseGradient, b: &SparseGradient, num_rows: usize) -> f64 {
    let dim = a.dim().max(b.dim());
    let mut total = 0.0;
    let zero = vec![0.0; dim];
    let mut rows = a.indices();
    rows.extend(b.indices());
    rows.sort_unstable();
    rows.dedup();
    for r in rows {
        let x = a.get(r).unwrap_or(&zero);
        let y = b.get(r).unwrap_or(&zero);
        total += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    total / (num_rows * dim) as f64
}

pub fn dense_mse(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> f64 {
    assert_eq!((a.rows(), a.dim()), (b.rows(), b.dim()));
    let n = a.as_slice().len().max(1) as f64;
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformationLoss {
    pub client: f64,
    pub server: f64,
    pub total: f64,
}

/// Everything needed to measure compression loss on one round.
///
/// `compressed_uploads[u]` and `raw_uploads[u]` are the same client's
/// reconstructed and uncompressed contributions; `server_raw` and
/// `server_compressed` are the aggregate before and after server-side
/// compression. For embedding clustering the uploads and server matrices
/// hold embeddings rather than deltas.
#[derive(Debug, Clone)]
pub struct ProbeSnapshot {
    pub num_rows: usize,
    pub compressed_uploads: Vec<SparseGradient>,
    pub raw_uploads: Vec<SparseGradient>,
    pub server_raw: SparseGradient,
    pub server_compressed: SparseGradient,
}

/// Client loss is the MSE between the aggregate of compressed uploads and the
/// aggregate of raw uploads; server loss is the MSE introduced by server-side
/// compression.
pub fn information_loss_probe(snapshot: &ProbeSnapshot) -> InformationLoss {
    let clients = snapshot.raw_uploads.len();
    let agg_c = aggregate_item_gradients(&snapshot.compressed_uploads, clients);
    let agg_r = aggregate_item_gradients(&snapshot.raw_uploads, clients);
    let client = sparse_mse(&agg_c, &agg_r, snapshot.num_rows);
    let server = sparse_mse(&snapshot.server_raw, &snapshot.server_compressed, snapshot.num_rows);
    InformationLoss {
        client,
        server,
        total: client + server,
    }
}
