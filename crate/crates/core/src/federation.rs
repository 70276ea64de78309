//! Round orchestration: client selection, local training, uplink
//! compression, aggregation, global update and per-budget downlinks.
//!
//! Clients are simulated in-process. Within a round every selected client
//! trains against an immutable snapshot of its own item view, so the clients
//! run in parallel; the server pipeline that follows is sequential.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{self, decode, encode, identity_actions, ActionSet, PayloadError, FLOAT_BYTES};
use crate::baselines::{k_for_compression_rate, topk_decode, topk_encode, TopKError, TopKPayload};
use crate::clustering::{
    cluster_and_split, distinct_rows, group_bounds, kmeans, round_half_up, AdaptiveParams, ClusterError,
    SplitOutcome, ThresholdHistory,
};
use crate::dataset::InteractionDataset;
use crate::eval::{
    dense_mse, evaluate, evaluate_with, information_loss_probe, EvalMode, EvalModel, InformationLoss, ProbeSnapshot,
    RankingResult,
};
use crate::model::{dot, local_train, EmbeddingMatrix, SparseGradient, TrainConfig, TrainError, INIT_STD};
use crate::seeding::{rng_for, Stream};

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_KMEANS_ITERS: usize = 20;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("client fraction {fraction} of {clients} clients selects nobody")]
    NoClientsSelected { fraction: f64, clients: usize },
    #[error("round {round}: {source}")]
    Train {
        round: usize,
        #[source]
        source: TrainError,
    },
    #[error("round {round}: clustering failed: {source}")]
    Cluster {
        round: usize,
        #[source]
        source: ClusterError,
    },
    #[error("round {round}: bad payload from user {user}: {source}")]
    Payload {
        round: usize,
        user: usize,
        #[source]
        source: PayloadError,
    },
    #[error("round {round}: top-k payload: {source}")]
    TopK {
        round: usize,
        #[source]
        source: TopKError,
    },
    #[error("scoring parameter vectors differ in length ({expected} vs {found})")]
    ScoringLength { expected: usize, found: usize },
    #[error("global update produced non-finite item embeddings")]
    NonFinite,
}

/// Which compression scheme runs on both links.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Fedras,
    Topk,
    /// No compression on either link.
    None,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fedras" => Ok(Self::Fedras),
            "topk" => Ok(Self::Topk),
            "none" => Ok(Self::None),
            other => Err(format!("unknown method `{other}` (expected fedras, topk or none)")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fedras => "fedras",
            Self::Topk => "topk",
            Self::None => "none",
        })
    }
}

/// How a client's copy of the item matrix tracks the server between
/// participations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SyncStrategy {
    /// Clients apply every downlink they missed, so their copy is the initial
    /// matrix plus the reconstructed deltas of all rounds so far.
    #[default]
    Replay,
    /// A selected client receives the full current server matrix.
    FullRefresh,
}

impl FromStr for SyncStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "replay" => Ok(Self::Replay),
            "full_refresh" => Ok(Self::FullRefresh),
            other => Err(format!("unknown sync strategy `{other}` (expected replay or full_refresh)")),
        }
    }
}

/// Per-client bandwidth budgets, expressed as compression rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSpec {
    Uniform(f64),
    /// Each client draws its rate uniformly from `[lo, hi]` once.
    Range(f64, f64),
}

impl BudgetSpec {
    pub fn midpoint(&self) -> f64 {
        match *self {
            Self::Uniform(cr) => cr,
            Self::Range(lo, hi) => 0.5 * (lo + hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub dim: usize,
    pub train: TrainConfig,
    pub rounds: usize,
    pub client_fraction: f64,
    pub budget: BudgetSpec,
    /// Fluctuation factor; derived from the budget spread when absent.
    pub alpha: Option<f64>,
    pub method: Method,
    pub sync: SyncStrategy,
    pub seed: u64,
    pub kmeans_max_iters: usize,
    pub eval_k: usize,
    pub eval_mode: EvalMode,
    pub eval_model: EvalModel,
    /// Run the information-loss probe every this many rounds (0 disables).
    pub probe_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            dim: crate::model::DEFAULT_DIM,
            train: TrainConfig::default(),
            rounds: 500,
            client_fraction: 0.1,
            budget: BudgetSpec::Uniform(0.9375),
            alpha: None,
            method: Method::Fedras,
            sync: SyncStrategy::Replay,
            seed: 0,
            kmeans_max_iters: DEFAULT_KMEANS_ITERS,
            eval_k: crate::eval::DEFAULT_K,
            eval_mode: EvalMode::Sampled,
            eval_model: EvalModel::Server,
            probe_every: 0,
        }
    }
}

fn check_cr(cr: f64, what: &str) -> Result<(), FederationError> {
    if (0.0..1.0).contains(&cr) {
        Ok(())
    } else {
        Err(FederationError::Config(format!("{what} must lie in [0, 1), got {cr}")))
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        if self.dim == 0 {
            return Err(FederationError::Config("model.dim must be positive".into()));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(FederationError::Config(format!(
                "fed.client_fraction must lie in (0, 1], got {}",
                self.client_fraction
            )));
        }
        match self.budget {
            BudgetSpec::Uniform(cr) => check_cr(cr, "comm.cr")?,
            BudgetSpec::Range(lo, hi) => {
                check_cr(lo, "comm.cr_range lower bound")?;
                check_cr(hi, "comm.cr_range upper bound")?;
                if lo > hi {
                    return Err(FederationError::Config(format!("comm.cr_range is reversed: [{lo}, {hi}]")));
                }
            }
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(FederationError::Config(format!("comm.alpha must lie in (0, 1), got {a}")));
            }
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return Err(FederationError::Config(format!("train.lr must be finite and non-negative, got {}", self.train.lr)));
        }
        if self.train.batch_size == 0 {
            return Err(FederationError::Config("train.batch must be positive".into()));
        }
        if self.kmeans_max_iters == 0 {
            return Err(FederationError::Config("kmeans iteration cap must be positive".into()));
        }
        if self.eval_k == 0 {
            return Err(FederationError::Config("eval k must be positive".into()));
        }
        Ok(())
    }

    /// Fluctuation factor in effect. Heterogeneous budgets without an explicit
    /// value get the spread of their row budgets around the midpoint target.
    pub fn effective_alpha(&self) -> f64 {
        if let Some(a) = self.alpha {
            return a;
        }
        match self.budget {
            BudgetSpec::Range(lo, hi) if hi > lo => {
                let spread = (hi - lo) / (2.0 * (1.0 - 0.5 * (lo + hi)));
                spread.clamp(0.01, 0.99)
            }
            _ => DEFAULT_ALPHA,
        }
    }
}

/// Row budget for compression rate `cr` over `num_rows` rows.
pub fn budget_rows(num_rows: usize, cr: f64) -> usize {
    round_half_up(num_rows as f64 * (1.0 - cr)).max(1)
}

/// One simulated client and the number of rows it may receive or send.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClientProfile {
    pub user: usize,
    pub budget: usize,
}

pub fn client_profiles(num_users: usize, num_items: usize, spec: BudgetSpec, seed: u64) -> Vec<ClientProfile> {
    match spec {
        BudgetSpec::Uniform(cr) => {
            let e = budget_rows(num_items, cr);
            (0..num_users).map(|user| ClientProfile { user, budget: e }).collect()
        }
        BudgetSpec::Range(lo, hi) => {
            let mut rng = rng_for(seed, Stream::Budgets, &[]);
            (0..num_users)
                .map(|user| {
                    let cr = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                    ClientProfile {
                        user,
                        budget: budget_rows(num_items, cr),
                    }
                })
                .collect()
        }
    }
}

/// Uniform sample of `round(fraction * num_clients)` clients, ascending.
pub fn select_clients<R: Rng + ?Sized>(
    num_clients: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>, FederationError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FederationError::Config(format!(
            "client fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let count = round_half_up(fraction * num_clients as f64).min(num_clients);
    if count == 0 {
        return Err(FederationError::NoClientsSelected {
            fraction,
            clients: num_clients,
        });
    }
    let mut chosen = sample(rng, num_clients, count).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// What a client sends back. Only item rows and shared scoring parameters
/// can be represented here.
#[derive(Debug, Clone, PartialEq)]
pub enum UplinkPayload {
    Raw(SparseGradient),
    Actions(ActionSet),
    TopK(TopKPayload),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub user: usize,
    pub payload: UplinkPayload,
    pub scoring_params: Vec<f64>,
}

impl ClientUpload {
    pub fn counted_bytes(&self) -> usize {
        match &self.payload {
            UplinkPayload::Raw(g) => g.len() * g.dim() * FLOAT_BYTES,
            UplinkPayload::Actions(a) => a.num_actions() * a.dim * FLOAT_BYTES,
            UplinkPayload::TopK(p) => p.value_bytes(),
        }
    }

    pub fn reconstruct(&self, num_rows: usize, dim: usize) -> Result<SparseGradient, UplinkError> {
        match &self.payload {
            UplinkPayload::Raw(g) => Ok(g.clone()),
            UplinkPayload::Actions(a) => decode(a, num_rows).map_err(UplinkError::Actions),
            UplinkPayload::TopK(p) => topk_decode(p, num_rows, dim).map_err(UplinkError::TopK),
        }
    }
}

#[derive(Debug, Error)]
pub enum UplinkError {
    #[error(transparent)]
    Actions(PayloadError),
    #[error(transparent)]
    TopK(TopKError),
}

/// Uncompressed copies a client keeps only when probing.
#[derive(Debug, Clone)]
pub struct ClientShadow {
    pub raw_delta: SparseGradient,
    /// Trained item embeddings of the touched rows.
    pub trained_rows: SparseGradient,
}

#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub upload: ClientUpload,
    /// Stays with the client.
    pub user_embedding: Vec<f64>,
    pub loss: f64,
    pub shadow: Option<ClientShadow>,
}

/// Settings shared by every client in a run.
#[derive(Debug, Clone)]
pub struct ClientSettings {
    pub train: TrainConfig,
    pub method: Method,
    pub topk_k: usize,
    pub kmeans_max_iters: usize,
    pub seed: u64,
    pub keep_shadow: bool,
}

/// Compresses a gradient into at most `groups` plain k-means groups.
pub fn kmeans_compress<R: Rng + ?Sized>(
    gradient: &SparseGradient,
    groups: usize,
    round: usize,
    max_iters: usize,
    rng: &mut R,
) -> Result<ActionSet, ClusterError> {
    let (ids, points) = gradient.to_points();
    let k = groups.min(distinct_rows(&points)).max(1);
    let out = kmeans(&points, k, rng, max_iters)?;
    Ok(encode(&out.partition, &ids, round as u32))
}

/// One client's round: local training from its item view, then an upload
/// that is compressed only when the delta has more rows than the budget.
pub fn client_round(
    dataset: &InteractionDataset,
    profile: ClientProfile,
    item_view: &EmbeddingMatrix,
    user_embedding: &[f64],
    scoring: &[f64],
    settings: &ClientSettings,
    round: usize,
) -> Result<ClientOutcome, FederationError> {
    let coords = [round as u64, profile.user as u64];
    let mut rng = rng_for(settings.seed, Stream::ClientTrain, &coords);
    let res = local_train(
        dataset,
        profile.user,
        item_view,
        user_embedding,
        scoring,
        &settings.train,
        &mut rng,
    )
    .map_err(|source| FederationError::Train { round, source })?;

    let delta = res.item_delta;
    let payload = match settings.method {
        Method::Fedras if delta.len() > profile.budget => {
            let mut rng = rng_for(settings.seed, Stream::ClientCompress, &coords);
            let set = kmeans_compress(&delta, profile.budget, round, settings.kmeans_max_iters, &mut rng)
                .map_err(|source| FederationError::Cluster { round, source })?;
            UplinkPayload::Actions(set)
        }
        Method::Fedras | Method::None => UplinkPayload::Raw(delta.clone()),
        Method::Topk => UplinkPayload::TopK(
            topk_encode(&delta, settings.topk_k).map_err(|source| FederationError::TopK { round, source })?,
        ),
    };

    let shadow = settings.keep_shadow.then(|| {
        let mut trained = SparseGradient::new(delta.dim());
        for (row, d) in delta.iter() {
            let base = item_view.row(row as usize);
            trained.insert(row, base.iter().zip(d).map(|(b, x)| b + x).collect());
        }
        ClientShadow {
            raw_delta: delta,
            trained_rows: trained,
        }
    });

    Ok(ClientOutcome {
        upload: ClientUpload {
            user: profile.user,
            payload,
            scoring_params: res.scoring_params,
        },
        user_embedding: res.user_embedding,
        loss: res.last_epoch_loss,
        shadow,
    })
}

/// `(1/|S|) * sum_u g_u * (|S| / |S_i|)` evaluated term by term.
pub fn aggregate_item_gradients_literal(uploads: &[SparseGradient], num_selected: usize) -> SparseGradient {
    let dim = uploads.first().map(SparseGradient::dim).unwrap_or(0);
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for g in uploads {
        for (row, _) in g.iter() {
            *counts.entry(row).or_default() += 1;
        }
    }
    let s = num_selected as f64;
    let mut sums: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for g in uploads {
        for (row, values) in g.iter() {
            let weight = s / counts[&row] as f64;
            let acc = sums.entry(row).or_insert_with(|| vec![0.0; dim]);
            for (a, v) in acc.iter_mut().zip(values) {
                *a += v * weight;
            }
        }
    }
    let mut out = SparseGradient::new(dim);
    for (row, mut acc) in sums {
        acc.iter_mut().for_each(|a| *a /= s);
        out.insert(row, acc);
    }
    out
}

/// Mean of each item's delta over the clients whose upload contains it.
///
/// This is the per-item reweighted average with weight `|S|/|S_i|`, which
/// cancels to the participant mean; debug builds check the two agree.
pub fn aggregate_item_gradients(uploads: &[SparseGradient], num_selected: usize) -> SparseGradient {
    let dim = uploads.first().map(SparseGradient::dim).unwrap_or(0);
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for g in uploads {
        assert_eq!(g.dim(), dim, "uploads must share one width");
        for (row, values) in g.iter() {
            let (acc, n) = sums.entry(row).or_insert_with(|| (vec![0.0; dim], 0));
            *n += 1;
            for (a, v) in acc.iter_mut().zip(values) {
                *a += v;
            }
        }
    }
    let mut out = SparseGradient::new(dim);
    for (row, (mut acc, n)) in sums {
        let inv = n as f64;
        acc.iter_mut().for_each(|a| *a /= inv);
        out.insert(row, acc);
    }

    if cfg!(debug_assertions) && num_selected > 0 {
        let literal = aggregate_item_gradients_literal(uploads, num_selected);
        let magnitude = aggregate_item_gradients_literal(&uploads.iter().map(abs_rows).collect::<Vec<_>>(), num_selected);
        for (row, values) in out.iter() {
            let other = literal.get(row).unwrap_or(&[]);
            let scale = magnitude.get(row).unwrap_or(&[]);
            for ((a, b), m) in values.iter().zip(other).zip(scale) {
                debug_assert!(
                    (a - b).abs() <= 1e-12 * m.max(1e-300),
                    "row {row}: participant mean {a} vs reweighted sum {b}"
                );
            }
        }
    }
    out
}

fn abs_rows(g: &SparseGradient) -> SparseGradient {
    let mut out = SparseGradient::new(g.dim());
    for (row, values) in g.iter() {
        out.insert(row, values.iter().map(|v| v.abs()).collect());
    }
    out
}

/// Element-wise mean of the clients' shared scoring parameters.
pub fn aggregate_scoring(models: &[Vec<f64>]) -> Result<Vec<f64>, FederationError> {
    let Some(first) = models.first() else {
        return Ok(Vec::new());
    };
    let mut acc = vec![0.0; first.len()];
    for m in models {
        if m.len() != acc.len() {
            return Err(FederationError::ScoringLength {
                expected: acc.len(),
                found: m.len(),
            });
        }
        for (a, v) in acc.iter_mut().zip(m) {
            *a += v;
        }
    }
    let n = models.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

pub fn apply_global_update(items: &mut EmbeddingMatrix, delta: &SparseGradient) -> Result<(), FederationError> {
    assert_eq!(items.dim(), delta.dim(), "delta width must match the item matrix");
    items.add_sparse(delta);
    let touched_finite = delta
        .iter()
        .all(|(row, _)| items.row(row as usize).iter().all(|v| v.is_finite()));
    if touched_finite {
        Ok(())
    } else {
        Err(FederationError::NonFinite)
    }
}

/// Downlink messages keyed by client budget.
#[derive(Debug, Clone)]
pub struct DownlinkPlan {
    pub messages: BTreeMap<usize, ActionSet>,
    /// Present when cluster-and-split ran.
    pub split: Option<SplitOutcome>,
    pub threshold: Option<f64>,
}

impl DownlinkPlan {
    /// The message for the largest budget.
    pub fn widest(&self) -> Option<&ActionSet> {
        self.messages.values().next_back()
    }
}

/// Builds one action set per distinct budget from a single cluster-and-split
/// pass over the aggregated delta.
///
/// A budget that covers every nonzero row gets the rows verbatim. Otherwise
/// the client gets the partition captured at the largest size not above its
/// budget, or the stopping partition when the split ended earlier. Budgets
/// below the initial group count fall back to plain k-means.
#[allow(clippy::too_many_arguments)]
pub fn prepare_downlinks<R: Rng + ?Sized>(
    delta: &SparseGradient,
    target: usize,
    alpha: f64,
    budgets: &BTreeSet<usize>,
    history: &mut ThresholdHistory,
    kmeans_max_iters: usize,
    round: usize,
    rng: &mut R,
) -> Result<DownlinkPlan, FederationError> {
    if budgets.contains(&0) {
        return Err(FederationError::Config("every client budget must be at least one row".into()));
    }
    let round_id = round as u32;
    let threshold = history.current();
    let compress_needed = budgets.iter().any(|&e| delta.len() > e);
    if !compress_needed {
        let set = identity_actions(delta, round_id);
        return Ok(DownlinkPlan {
            messages: budgets.iter().map(|&e| (e, set.clone())).collect(),
            split: None,
            threshold,
        });
    }

    let (ids, points) = delta.to_points();
    let (_, c_m) = group_bounds(target, alpha);
    let sizes: BTreeSet<usize> = budgets.iter().map(|&e| e.min(c_m)).collect();
    let params = AdaptiveParams {
        target,
        alpha,
        kmeans_max_iters,
    };
    let outcome = cluster_and_split(&points, &params, history, &sizes, rng)
        .map_err(|source| FederationError::Cluster { round, source })?;
    if let Some(v) = outcome.recorded {
        history.record(v);
    }

    let mut messages = BTreeMap::new();
    for &e in budgets {
        let set = if delta.len() <= e {
            identity_actions(delta, round_id)
        } else if let Some(p) = outcome.partition_for_budget(e) {
            encode(p, &ids, round_id)
        } else {
            let out = kmeans(&points, e, rng, kmeans_max_iters)
                .map_err(|source| FederationError::Cluster { round, source })?;
            encode(&out.partition, &ids, round_id)
        };
        messages.insert(e, set);
    }
    Ok(DownlinkPlan {
        messages,
        split: Some(outcome),
        threshold,
    })
}

/// Client-side copies of the item matrix, one per budget class.
///
/// Every client in a class receives the same downlinks, so a client that
/// skipped rounds and replays the missed messages ends up with exactly the
/// class copy. Under full refresh there is a single copy tracking the
/// server.
#[derive(Debug, Clone)]
pub struct ItemViews {
    strategy: SyncStrategy,
    views: BTreeMap<usize, EmbeddingMatrix>,
}

impl ItemViews {
    pub fn new(strategy: SyncStrategy, initial: &EmbeddingMatrix, budgets: &BTreeSet<usize>) -> Self {
        let views = match strategy {
            SyncStrategy::Replay => budgets.iter().map(|&e| (e, initial.clone())).collect(),
            SyncStrategy::FullRefresh => BTreeMap::from([(0, initial.clone())]),
        };
        Self { strategy, views }
    }

    pub fn view(&self, budget: usize) -> &EmbeddingMatrix {
        match self.strategy {
            SyncStrategy::Replay => &self.views[&budget],
            SyncStrategy::FullRefresh => &self.views[&0],
        }
    }

    pub fn apply_replay(&mut self, budget: usize, delta: &SparseGradient) {
        if let Some(v) = self.views.get_mut(&budget) {
            v.add_sparse(delta);
        }
    }

    pub fn refresh(&mut self, server: &EmbeddingMatrix) {
        if self.strategy == SyncStrategy::FullRefresh {
            self.views.insert(0, server.clone());
        }
    }
}

/// Everything mutable the server carries between rounds.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round: usize,
    pub items: EmbeddingMatrix,
    pub scoring: Vec<f64>,
    pub history: ThresholdHistory,
    pub views: ItemViews,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub hr10: f64,
    pub ndcg10: f64,
    /// Counted bytes of the widest downlink message.
    pub down_bytes: usize,
    /// Counted bytes summed over all uploads.
    pub up_bytes: usize,
    /// Action count of the widest compressed downlink.
    pub groups_used: Option<usize>,
    pub min_avg_cos: Option<f64>,
    pub threshold: Option<f64>,
    pub mean_train_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeRecord {
    pub round: usize,
    pub gradient: InformationLoss,
    pub embedding: InformationLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub method: Method,
    pub final_hr: f64,
    pub final_ndcg: f64,
    pub best_hr: f64,
    pub best_ndcg: f64,
    /// Round of `best_hr`; `None` when no round ran.
    pub best_round: Option<usize>,
    pub initial_hr: f64,
    pub initial_ndcg: f64,
    pub target_groups: usize,
    pub alpha: f64,
    pub mean_groups_used: Option<f64>,
    /// Full initial matrix sent once before the first round; not counted.
    pub bootstrap_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<RoundMetrics>,
    pub probes: Vec<ProbeRecord>,
    pub summary: RunSummary,
    pub items: EmbeddingMatrix,
    pub users: EmbeddingMatrix,
}

fn summarize(
    cfg: &FederationConfig,
    rows: &[RoundMetrics],
    initial: RankingResult,
    target: usize,
    alpha: f64,
    bootstrap_bytes: usize,
) -> RunSummary {
    let (final_hr, final_ndcg) = rows
        .last()
        .map(|r| (r.hr10, r.ndcg10))
        .unwrap_or((initial.hr_at_k, initial.ndcg_at_k));
    let best = rows.iter().fold(None::<&RoundMetrics>, |b, r| match b {
        Some(b) if b.hr10 >= r.hr10 => Some(b),
        _ => Some(r),
    });
    let groups: Vec<usize> = rows.iter().filter_map(|r| r.groups_used).collect();
    RunSummary {
        method: cfg.method,
        final_hr,
        final_ndcg,
        best_hr: best.map_or(initial.hr_at_k, |r| r.hr10),
        best_ndcg: rows.iter().map(|r| r.ndcg10).reduce(f64::max).unwrap_or(initial.ndcg_at_k),
        best_round: best.map(|r| r.round),
        initial_hr: initial.hr_at_k,
        initial_ndcg: initial.ndcg_at_k,
        target_groups: target,
        alpha,
        mean_groups_used: (!groups.is_empty()).then(|| groups.iter().sum::<usize>() as f64 / groups.len() as f64),
        bootstrap_bytes,
    }
}

struct ProbeInputs<'a> {
    outcomes: &'a [ClientOutcome],
    uploads: &'a [SparseGradient],
    profiles: &'a [ClientProfile],
    delta: &'a SparseGradient,
    server_compressed: &'a SparseGradient,
    items: &'a EmbeddingMatrix,
    groups: usize,
}

/// Loss of clustering gradients versus clustering embeddings on the same
/// round, at the same group counts.
fn run_probe(inputs: &ProbeInputs, cfg: &FederationConfig, num_items: usize, round: usize) -> Result<ProbeRecord, FederationError> {
    let shadows: Vec<&ClientShadow> = inputs
        .outcomes
        .iter()
        .map(|o| o.shadow.as_ref().expect("probe rounds keep shadows"))
        .collect();
    let gradient = information_loss_probe(&ProbeSnapshot {
        num_rows: num_items,
        compressed_uploads: inputs.uploads.to_vec(),
        raw_uploads: shadows.iter().map(|s| s.raw_delta.clone()).collect(),
        server_raw: inputs.delta.clone(),
        server_compressed: inputs.server_compressed.clone(),
    });

    let mut compressed_emb = Vec::with_capacity(shadows.len());
    for (s, o) in shadows.iter().zip(inputs.outcomes) {
        let budget = inputs.profiles[o.upload.user].budget;
        let rows = &s.trained_rows;
        if rows.len() > budget {
            let mut rng = rng_for(cfg.seed, Stream::Probe, &[round as u64, o.upload.user as u64]);
            let set = kmeans_compress(rows, budget, round, cfg.kmeans_max_iters, &mut rng)
                .map_err(|source| FederationError::Cluster { round, source })?;
            compressed_emb.push(decode(&set, num_items).map_err(|source| FederationError::Payload {
                round,
                user: o.upload.user,
                source,
            })?);
        } else {
            compressed_emb.push(rows.clone());
        }
    }
    let raw_emb: Vec<SparseGradient> = shadows.iter().map(|s| s.trained_rows.clone()).collect();
    let clients = raw_emb.len();
    let client = crate::eval::sparse_mse(
        &aggregate_item_gradients(&compressed_emb, clients),
        &aggregate_item_gradients(&raw_emb, clients),
        num_items,
    );

    let mut rng = rng_for(cfg.seed, Stream::Probe, &[round as u64, u64::MAX]);
    let k = inputs.groups.clamp(1, inputs.items.rows());
    let out = kmeans(inputs.items, k, &mut rng, cfg.kmeans_max_iters)
        .map_err(|source| FederationError::Cluster { round, source })?;
    let mut clustered = inputs.items.clone();
    for g in &out.partition.groups {
        for &m in &g.members {
            clustered.row_mut(m).copy_from_slice(&g.centroid);
        }
    }
    let server = dense_mse(inputs.items, &clustered);
    Ok(ProbeRecord {
        round,
        gradient,
        embedding: InformationLoss {
            client,
            server,
            total: client + server,
        },
    })
}

/// Runs a full simulation and returns the per-round log.
pub fn run_experiment(dataset: &InteractionDataset, cfg: &FederationConfig) -> Result<RunReport, FederationError> {
    cfg.validate()?;
    let n = dataset.num_items;
    let m = dataset.num_users;
    let dim = cfg.dim;

    let target = budget_rows(n, cfg.budget.midpoint());
    let alpha = cfg.effective_alpha();
    let profiles = client_profiles(m, n, cfg.budget, cfg.seed);
    let budgets: BTreeSet<usize> = match cfg.method {
        Method::Fedras => profiles.iter().map(|p| p.budget).collect(),
        Method::Topk | Method::None => BTreeSet::from([n]),
    };
    let class_of = |user: usize| match cfg.method {
        Method::Fedras => profiles[user].budget,
        Method::Topk | Method::None => n,
    };
    let topk_k = k_for_compression_rate(dim, cfg.budget.midpoint());

    let items0 = EmbeddingMatrix::random_normal(n, dim, INIT_STD, &mut rng_for(cfg.seed, Stream::Init, &[0]));
    let mut users = EmbeddingMatrix::random_normal(m, dim, INIT_STD, &mut rng_for(cfg.seed, Stream::Init, &[1]));
    let mut state = RoundState {
        round: 0,
        views: ItemViews::new(cfg.sync, &items0, &budgets),
        items: items0,
        scoring: Vec::new(),
        history: ThresholdHistory::new(),
    };
    let bootstrap_bytes = actions::full_matrix_bytes(n, dim);
    let initial = evaluate(&state.items, &users, dataset, cfg.eval_k, cfg.eval_mode);
    info!(
        "{} users, {} items, method {}, target {} groups (alpha {alpha}), initial HR@{} {:.4}",
        m, n, cfg.method, target, cfg.eval_k, initial.hr_at_k
    );

    let mut rows = Vec::with_capacity(cfg.rounds);
    let mut probes = Vec::new();
    for t in 0..cfg.rounds {
        state.round = t;
        let probing = cfg.method == Method::Fedras && cfg.probe_every > 0 && t % cfg.probe_every == 0;
        let selected = select_clients(m, cfg.client_fraction, &mut rng_for(cfg.seed, Stream::Selection, &[t as u64]))?;
        let settings = ClientSettings {
            train: cfg.train.clone(),
            method: cfg.method,
            topk_k,
            kmeans_max_iters: cfg.kmeans_max_iters,
            seed: cfg.seed,
            keep_shadow: probing,
        };

        let outcomes: Vec<ClientOutcome> = selected
            .par_iter()
            .map(|&u| {
                client_round(
                    dataset,
                    profiles[u],
                    state.views.view(class_of(u)),
                    users.row(u),
                    &state.scoring,
                    &settings,
                    t,
                )
            })
            .collect::<Result<_, _>>()?;

        let mut uploads = Vec::with_capacity(outcomes.len());
        let mut up_bytes = 0;
        let mut loss = 0.0;
        for o in &outcomes {
            up_bytes += o.upload.counted_bytes();
            loss += o.loss;
            let g = o.upload.reconstruct(n, dim).map_err(|e| match e {
                UplinkError::Actions(source) => FederationError::Payload {
                    round: t,
                    user: o.upload.user,
                    source,
                },
                UplinkError::TopK(source) => FederationError::TopK { round: t, source },
            })?;
            uploads.push(g);
            users.row_mut(o.upload.user).copy_from_slice(&o.user_embedding);
        }
        let scoring: Vec<Vec<f64>> = outcomes.iter().map(|o| o.upload.scoring_params.clone()).collect();
        state.scoring = aggregate_scoring(&scoring)?;
        let delta = aggregate_item_gradients(&uploads, selected.len());
        apply_global_update(&mut state.items, &delta)?;

        let mut server_rng = rng_for(cfg.seed, Stream::ServerCluster, &[t as u64]);
        let (down_bytes, groups_used, min_avg_cos, threshold, widest) = match cfg.method {
            Method::Fedras => {
                let plan = prepare_downlinks(
                    &delta,
                    target,
                    alpha,
                    &budgets,
                    &mut state.history,
                    cfg.kmeans_max_iters,
                    t,
                    &mut server_rng,
                )?;
                let mut widest = SparseGradient::new(dim);
                for (&e, set) in &plan.messages {
                    let g = decode(set, n).map_err(|source| FederationError::Payload { round: t, user: usize::MAX, source })?;
                    if cfg.sync == SyncStrategy::Replay {
                        state.views.apply_replay(e, &g);
                    }
                    widest = g;
                }
                let w = plan.widest().map_or(0, ActionSet::num_actions);
                (
                    w * dim * FLOAT_BYTES,
                    plan.split.as_ref().map(|_| w),
                    plan.split.as_ref().map(|s| s.min_avg_cos_used),
                    plan.threshold,
                    widest,
                )
            }
            Method::None => {
                state.views.apply_replay(n, &delta);
                (delta.len() * dim * FLOAT_BYTES, None, None, None, delta.clone())
            }
            Method::Topk => {
                let p = topk_encode(&delta, topk_k).map_err(|source| FederationError::TopK { round: t, source })?;
                let g = topk_decode(&p, n, dim).map_err(|source| FederationError::TopK { round: t, source })?;
                state.views.apply_replay(n, &g);
                (p.value_bytes(), None, None, None, g)
            }
        };
        state.views.refresh(&state.items);
        let down_bytes = if cfg.sync == SyncStrategy::FullRefresh {
            bootstrap_bytes
        } else {
            down_bytes
        };

        if probing {
            let record = run_probe(
                &ProbeInputs {
                    outcomes: &outcomes,
                    uploads: &uploads,
                    profiles: &profiles,
                    delta: &delta,
                    server_compressed: &widest,
                    items: &state.items,
                    groups: groups_used.unwrap_or(delta.len()).max(1),
                },
                cfg,
                n,
                t,
            )?;
            debug!("round {t} probe: {record:?}");
            probes.push(record);
        }

        let r = match cfg.eval_model {
            EvalModel::Server => evaluate(&state.items, &users, dataset, cfg.eval_k, cfg.eval_mode),
            EvalModel::Client => evaluate_with(dataset, cfg.eval_k, cfg.eval_mode, |u, i| {
                dot(users.row(u), state.views.view(class_of(u)).row(i as usize))
            }),
        };
        let row = RoundMetrics {
            round: t,
            hr10: r.hr_at_k,
            ndcg10: r.ndcg_at_k,
            down_bytes,
            up_bytes,
            groups_used,
            min_avg_cos,
            threshold,
            mean_train_loss: loss / outcomes.len() as f64,
        };
        if t % 25 == 0 || t + 1 == cfg.rounds {
            info!(
                "round {t}: HR {:.4} NDCG {:.4} loss {:.4} groups {:?}",
                row.hr10, row.ndcg10, row.mean_train_loss, row.groups_used
            );
        }
        rows.push(row);
    }

    let summary = summarize(cfg, &rows, initial, target, alpha, bootstrap_bytes);
    Ok(RunReport {
        rows,
        probes,
        summary,
        items: state.items,
        users,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grad(dim: usize, rows: &[(u32, Vec<f64>)]) -> SparseGradient {
        let mut g = SparseGradient::new(dim);
        for (r, v) in rows {
            g.insert(*r, v.clone());
        }
        g
    }

    #[test]
    fn selection_size_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(select_clients(943, 0.1, &mut rng).unwrap().len(), 94);
        assert_eq!(select_clients(10, 1.0, &mut rng).unwrap(), (0..10).collect::<Vec<_>>());
        let a = select_clients(943, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = select_clients(943, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            select_clients(4, 0.1, &mut rng),
            Err(FederationError::NoClientsSelected { .. })
        ));
    }

    #[test]
    fn aggregation_examples() {
        let a = grad(2, &[(0, vec![1.0, 2.0]), (1, vec![4.0, 4.0])]);
        let b = grad(2, &[(0, vec![3.0, 6.0])]);
        let c = grad(2, &[(2, vec![1.0, 1.0])]);
        let agg = aggregate_item_gradients(&[a.clone(), b, c], 3);
        assert_eq!(agg.get(0).unwrap(), &[2.0, 4.0]);
        assert_eq!(agg.get(1).unwrap(), &[4.0, 4.0]);
        assert_eq!(agg.get(2).unwrap(), &[1.0, 1.0]);

        assert_eq!(aggregate_item_gradients(std::slice::from_ref(&a), 1), a);

        let same = vec![grad(2, &[(7, vec![0.3, -0.1])]); 5];
        assert_eq!(aggregate_item_gradients(&same, 5).get(7).unwrap(), &[0.3, -0.1]);
    }

    #[test]
    fn scoring_mean() {
        assert_eq!(aggregate_scoring(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap(), vec![2.0, 4.0]);
        assert_eq!(aggregate_scoring(&[vec![1.5]]).unwrap(), vec![1.5]);
        assert_eq!(aggregate_scoring(&[vec![], vec![]]).unwrap(), Vec::<f64>::new());
        assert!(matches!(
            aggregate_scoring(&[vec![1.0], vec![1.0, 2.0]]),
            Err(FederationError::ScoringLength { expected: 1, found: 2 })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let models: Vec<Vec<f64>> = (0..5).map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let got = aggregate_scoring(&models).unwrap();
        for j in 0..7 {
            let mut s = 0.0;
            for m in &models {
                s += m[j];
            }
            assert!((got[j] - s / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn global_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = EmbeddingMatrix::random_normal(6, 3, 1.0, &mut rng);

        let mut same = q.clone();
        apply_global_update(&mut same, &SparseGradient::new(3)).unwrap();
        assert_eq!(same, q);

        let mut one = q.clone();
        apply_global_update(&mut one, &grad(3, &[(2, vec![1.0, 0.0, -1.0])])).unwrap();
        for r in 0..6 {
            if r != 2 {
                assert_eq!(one.row(r), q.row(r));
            }
        }

        let d = grad(3, &[(0, vec![0.5, 0.25, 1.0]), (5, vec![-2.0, 1.0, 3.0])]);
        let mut got = q.clone();
        apply_global_update(&mut got, &d).unwrap();
        let dense = d.to_dense(6);
        for (i, v) in got.as_slice().iter().enumerate() {
            assert_eq!(*v, q.as_slice()[i] + dense.as_slice()[i]);
        }

        let mut bad = q.clone();
        assert!(matches!(
            apply_global_update(&mut bad, &grad(3, &[(1, vec![f64::INFINITY, 0.0, 0.0])])),
            Err(FederationError::NonFinite)
        ));
    }

    fn random_delta(rows: usize, dim: usize, seed: u64) -> SparseGradient {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = SparseGradient::new(dim);
        for r in 0..rows as u32 {
            g.insert(r, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
        g
    }

    #[test]
    fn homogeneous_budgets_share_one_message() {
        let delta = random_delta(300, 4, 1);
        let mut history = ThresholdHistory::new();
        let plan = prepare_downlinks(
            &delta,
            20,
            0.2,
            &BTreeSet::from([20]),
            &mut history,
            20,
            0,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(plan.messages.len(), 1);
        assert_eq!(plan.widest().unwrap().num_actions(), 20);
        assert_eq!(history.recorded().len(), 1);
    }

    #[test]
    fn heterogeneous_budgets_requested_sizes() {
        let delta = random_delta(600, 4, 2);
        let mut history = ThresholdHistory::new();
        history.record(2.0f64.min(1.0));
        let budgets = BTreeSet::from([50, 105, 400]);
        let plan = prepare_downlinks(&delta, 105, 0.2, &budgets, &mut history, 20, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let split = plan.split.as_ref().unwrap();
        let (c_i, c_m) = group_bounds(105, 0.2);
        assert_eq!((c_i, c_m), (84, 126));
        for (&e, set) in &plan.messages {
            assert!(set.num_actions() <= e.min(c_m), "budget {e}: {}", set.num_actions());
        }
        assert_eq!(plan.messages[&50].num_actions(), 50);
        assert!(split.used.len() >= c_i);
    }

    #[test]
    fn few_distinct_rows_are_sent_losslessly() {
        let mut delta = SparseGradient::new(2);
        for r in 0..200u32 {
            delta.insert(r, if r % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, -1.0] });
        }
        let mut history = ThresholdHistory::new();
        let plan = prepare_downlinks(&delta, 20, 0.2, &BTreeSet::from([20]), &mut history, 20, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let set = plan.widest().unwrap();
        assert_eq!(decode(set, 200).unwrap(), delta);
    }

    #[test]
    fn small_delta_goes_raw() {
        let delta = random_delta(10, 3, 4);
        let mut history = ThresholdHistory::new();
        let plan = prepare_downlinks(&delta, 20, 0.2, &BTreeSet::from([20]), &mut history, 20, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(plan.split.is_none());
        assert_eq!(decode(plan.widest().unwrap(), 10).unwrap(), delta);
        assert!(history.recorded().is_empty());
    }

    #[test]
    fn alpha_derivation() {
        let cfg = FederationConfig {
            budget: BudgetSpec::Range(0.7, 0.9),
            ..Default::default()
        };
        assert!((cfg.effective_alpha() - 0.5).abs() < 1e-12);
        assert_eq!(FederationConfig::default().effective_alpha(), 0.2);
    }

    #[test]
    fn validation_names_fields() {
        let cfg = FederationConfig {
            budget: BudgetSpec::Uniform(1.0),
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("comm.cr"));
        let cfg = FederationConfig {
            alpha: Some(1.5),
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("comm.alpha"));
    }
}
