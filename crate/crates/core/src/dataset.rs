//! Interaction logs, leave-one-out splits and negative sampling.
//!
//! Ratings are binarized: every logged (user, item) pair is a positive
//! interaction. Raw ids are remapped to dense 0-based indices in ascending
//! order of the original id, and the remap tables travel with the split.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{self, Stream};

/// Negatives drawn per user for the sampled ranking protocol.
pub const EVAL_NEGATIVES: usize = 99;

/// Users with fewer interactions than this are dropped from Lastfm logs.
pub const LASTFM_MIN_INTERACTIONS: usize = 5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no interactions found in {0}")]
    Empty(PathBuf),
    #[error("user {user} has only {available} non-interacted items, {needed} evaluation negatives required")]
    NoRoomForNegatives {
        user: u64,
        available: usize,
        needed: usize,
    },
    #[error("user {0} has no interactions")]
    NoInteractions(u64),
    #[error("split cache: {0}")]
    Cache(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Supported interaction log layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `user<TAB>item<TAB>rating<TAB>timestamp` (MovieLens-100K `u.data`).
    TabSeparated,
    /// `user::item::rating::timestamp` (MovieLens-1M `ratings.dat`).
    DoubleColon,
    /// `user<TAB>artist<TAB>weight` with a header line (`user_artists.dat`).
    Lastfm,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "tab_separated" => Ok(Self::TabSeparated),
            "double_colon" => Ok(Self::DoubleColon),
            "lastfm" => Ok(Self::Lastfm),
            other => Err(format!(
                "unknown dataset format `{other}` (expected tab_separated, double_colon or lastfm)"
            )),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TabSeparated => "tab_separated",
            Self::DoubleColon => "double_colon",
            Self::Lastfm => "lastfm",
        })
    }
}

/// One binarized interaction with dense ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    /// Absent for logs without time information (Lastfm).
    pub timestamp: Option<i64>,
}

/// A parsed log after id remapping, before splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Interactions {
    pub num_users: usize,
    pub num_items: usize,
    pub records: Vec<Interaction>,
    /// Original user id for each dense user index.
    pub user_ids: Vec<u64>,
    /// Original item id for each dense item index.
    pub item_ids: Vec<u64>,
}

impl Interactions {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Builds a log from `(user, item, timestamp)` triples with arbitrary ids.
    ///
    /// Duplicate pairs collapse into one interaction carrying the latest
    /// timestamp.
    pub fn from_raw(raw: impl IntoIterator<Item = (u64, u64, Option<i64>)>) -> Self {
        let mut latest: HashMap<(u64, u64), Option<i64>> = HashMap::new();
        for (u, i, t) in raw {
            latest
                .entry((u, i))
                .and_modify(|cur| {
                    if t > *cur {
                        *cur = t;
                    }
                })
                .or_insert(t);
        }

        let mut user_ids: Vec<u64> = latest.keys().map(|&(u, _)| u).collect();
        user_ids.sort_unstable();
        user_ids.dedup();
        let mut item_ids: Vec<u64> = latest.keys().map(|&(_, i)| i).collect();
        item_ids.sort_unstable();
        item_ids.dedup();

        let user_index: HashMap<u64, u32> = user_ids
            .iter()
            .enumerate()
            .map(|(k, &u)| (u, k as u32))
            .collect();
        let item_index: HashMap<u64, u32> = item_ids
            .iter()
            .enumerate()
            .map(|(k, &i)| (i, k as u32))
            .collect();

        let mut records: Vec<Interaction> = latest
            .into_iter()
            .map(|((u, i), t)| Interaction {
                user: user_index[&u],
                item: item_index[&i],
                timestamp: t,
            })
            .collect();
        records.sort_unstable_by_key(|r| (r.user, r.item));

        Self {
            num_users: user_ids.len(),
            num_items: item_ids.len(),
            records,
            user_ids,
            item_ids,
        }
    }
}

fn parse_id(field: Option<&str>, what: &str, line: usize) -> Result<u64> {
    let field = field.ok_or_else(|| DatasetError::Parse {
        line,
        message: format!("missing {what} field"),
    })?;
    field.trim().parse().map_err(|_| DatasetError::Parse {
        line,
        message: format!("invalid {what} `{}`", field.trim()),
    })
}

/// Reads an interaction log and remaps ids to dense indices.
///
/// Lastfm logs drop users with fewer than [`LASTFM_MIN_INTERACTIONS`]
/// interactions before remapping, so items only those users touched vanish.
pub fn load_interactions(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Interactions> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut raw = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match format {
            DatasetFormat::TabSeparated | DatasetFormat::DoubleColon => {
                let mut fields: Box<dyn Iterator<Item = &str>> = match format {
                    DatasetFormat::TabSeparated => Box::new(line.split('\t')),
                    _ => Box::new(line.split("::")),
                };
                let user = parse_id(fields.next(), "user", lineno)?;
                let item = parse_id(fields.next(), "item", lineno)?;
                let rating = fields.next().ok_or_else(|| DatasetError::Parse {
                    line: lineno,
                    message: "missing rating field".into(),
                })?;
                rating
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| DatasetError::Parse {
                        line: lineno,
                        message: format!("invalid rating `{}`", rating.trim()),
                    })?;
                let ts = parse_id(fields.next(), "timestamp", lineno)?;
                raw.push((user, item, Some(ts as i64)));
            }
            DatasetFormat::Lastfm => {
                let mut fields = line.split('\t');
                let first = fields.next().unwrap_or_default();
                if lineno == 1 && first.trim().parse::<u64>().is_err() {
                    // header
                    continue;
                }
                let user = parse_id(Some(first), "user", lineno)?;
                let item = parse_id(fields.next(), "artist", lineno)?;
                let weight = fields.next().ok_or_else(|| DatasetError::Parse {
                    line: lineno,
                    message: "missing weight field".into(),
                })?;
                weight
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| DatasetError::Parse {
                        line: lineno,
                        message: format!("invalid weight `{}`", weight.trim()),
                    })?;
                raw.push((user, item, None));
            }
        }
    }

    if raw.is_empty() {
        return Err(DatasetError::Empty(path.to_path_buf()));
    }

    if format == DatasetFormat::Lastfm {
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for &(u, _, _) in &raw {
            *counts.entry(u).or_default() += 1;
        }
        raw.retain(|(u, _, _)| counts[u] >= LASTFM_MIN_INTERACTIONS);
        if raw.is_empty() {
            return Err(DatasetError::Empty(path.to_path_buf()));
        }
    }

    Ok(Interactions::from_raw(raw))
}

/// Per-user leave-one-out split with fixed evaluation negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    /// Sorted training positives per user.
    pub train: Vec<Vec<u32>>,
    pub test_item: Vec<u32>,
    /// Sorted evaluation negatives per user.
    pub eval_negatives: Vec<Vec<u32>>,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
}

impl InteractionDataset {
    /// Total interactions represented by the split (train plus held-out).
    pub fn interaction_count(&self) -> usize {
        self.train.iter().map(|t| t.len() + 1).sum()
    }

    pub fn is_train_positive(&self, user: usize, item: u32) -> bool {
        self.train[user].binary_search(&item).is_ok()
    }

    pub fn load(
        path: impl AsRef<Path>,
        format: DatasetFormat,
        seed: u64,
    ) -> Result<InteractionDataset> {
        let raw = load_interactions(path, format)?;
        leave_one_out_split(&raw, seed)
    }

    /// Writes the split, remap tables included, as line-oriented text.
    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
        let join = |v: &[u32]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let join64 = |v: &[u64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut body = String::new();
        body.push_str(SPLIT_CACHE_MAGIC);
        body.push('\n');
        body.push_str(&format!("num_users {}\n", self.num_users));
        body.push_str(&format!("num_items {}\n", self.num_items));
        body.push_str(&format!("user_ids {}\n", join64(&self.user_ids)));
        body.push_str(&format!("item_ids {}\n", join64(&self.item_ids)));
        for u in 0..self.num_users {
            body.push_str(&format!(
                "{} {} | {} | {}\n",
                u,
                self.test_item[u],
                join(&self.train[u]),
                join(&self.eval_negatives[u])
            ));
        }
        out.write_all(body.as_bytes()).map_err(io_err)?;
        out.flush().map_err(io_err)
    }

    pub fn read_cache(path: impl AsRef<Path>) -> Result<InteractionDataset> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        parse_cache(&text)
    }
}

const SPLIT_CACHE_MAGIC: &str = "fedras-split v1";

fn parse_cache(text: &str) -> Result<InteractionDataset> {
    let bad = |msg: String| DatasetError::Cache(msg);
    let mut lines = text.lines();
    if lines.next() != Some(SPLIT_CACHE_MAGIC) {
        return Err(bad("missing or unsupported version header".into()));
    }
    let mut header = |key: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("missing `{key}` line")))?;
        let rest = line
            .strip_prefix(key)
            .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))?;
        Ok(rest.trim().to_string())
    };
    let num_users: usize = header("num_users")?
        .parse()
        .map_err(|_| bad("invalid num_users".into()))?;
    let num_items: usize = header("num_items")?
        .parse()
        .map_err(|_| bad("invalid num_items".into()))?;
    let parse_list64 = |s: &str| -> Result<Vec<u64>> {
        s.split_whitespace()
            .map(|x| x.parse().map_err(|_| bad(format!("invalid id `{x}`"))))
            .collect()
    };
    let user_ids = parse_list64(&header("user_ids")?)?;
    let item_ids = parse_list64(&header("item_ids")?)?;
    if user_ids.len() != num_users || item_ids.len() != num_items {
        return Err(bad("remap table length mismatch".into()));
    }

    let parse_items = |s: &str| -> Result<Vec<u32>> {
        s.split_whitespace()
            .map(|x| {
                let v: u32 = x.parse().map_err(|_| bad(format!("invalid item `{x}`")))?;
                if v as usize >= num_items {
                    return Err(bad(format!("item {v} out of range")));
                }
                Ok(v)
            })
            .collect()
    };

    let mut train = Vec::with_capacity(num_users);
    let mut test_item = Vec::with_capacity(num_users);
    let mut eval_negatives = Vec::with_capacity(num_users);
    for (expected, line) in lines.enumerate() {
        let mut parts = line.split('|');
        let head: Vec<&str> = parts
            .next()
            .unwrap_or_default()
            .split_whitespace()
            .collect();
        if head.len() != 2 || head[0] != expected.to_string() {
            return Err(bad(format!("malformed user line {expected}")));
        }
        let test = parse_items(head[1])?;
        let tr = parse_items(parts.next().unwrap_or_default())?;
        let negs = parse_items(parts.next().unwrap_or_default())?;
        if parts.next().is_some() {
            return Err(bad(format!("malformed user line {expected}")));
        }
        test_item.push(test[0]);
        train.push(tr);
        eval_negatives.push(negs);
    }
    if train.len() != num_users {
        return Err(bad(format!(
            "expected {num_users} user lines, found {}",
            train.len()
        )));
    }

    Ok(InteractionDataset {
        num_users,
        num_items,
        train,
        test_item,
        eval_negatives,
        user_ids,
        item_ids,
    })
}

/// Leave-one-out split with [`EVAL_NEGATIVES`] evaluation negatives per user.
pub fn leave_one_out_split(raw: &Interactions, seed: u64) -> Result<InteractionDataset> {
    leave_one_out_split_with(raw, seed, EVAL_NEGATIVES)
}

/// Holds out each user's latest interaction (ties go to the larger item id;
/// logs without timestamps hold out a seeded random positive) and draws
/// `eval_negatives` distinct never-interacted items per user.
pub fn leave_one_out_split_with(
    raw: &Interactions,
    seed: u64,
    eval_negatives: usize,
) -> Result<InteractionDataset> {
    let mut per_user: Vec<Vec<Interaction>> = vec![Vec::new(); raw.num_users];
    for r in &raw.records {
        per_user[r.user as usize].push(*r);
    }

    let mut train = Vec::with_capacity(raw.num_users);
    let mut test_item = Vec::with_capacity(raw.num_users);
    let mut negatives = Vec::with_capacity(raw.num_users);

    for (u, records) in per_user.iter().enumerate() {
        if records.is_empty() {
            return Err(DatasetError::NoInteractions(raw.user_ids[u]));
        }
        let mut rng = seeding::rng_for(seed, Stream::Split, &[u as u64]);
        let held_out = if records.iter().all(|r| r.timestamp.is_some()) {
            records
                .iter()
                .max_by_key(|r| (r.timestamp, r.item))
                .map(|r| r.item)
                .unwrap()
        } else {
            let mut items: Vec<u32> = records.iter().map(|r| r.item).collect();
            items.sort_unstable();
            items[rng.random_range(0..items.len())]
        };

        let mut positives: Vec<u32> = records
            .iter()
            .map(|r| r.item)
            .filter(|&i| i != held_out)
            .collect();
        positives.sort_unstable();
        positives.dedup();

        let candidates: Vec<u32> = (0..raw.num_items as u32)
            .filter(|i| *i != held_out && positives.binary_search(i).is_err())
            .collect();
        if candidates.len() < eval_negatives {
            return Err(DatasetError::NoRoomForNegatives {
                user: raw.user_ids[u],
                available: candidates.len(),
                needed: eval_negatives,
            });
        }
        let mut negs: Vec<u32> = index::sample(&mut rng, candidates.len(), eval_negatives)
            .into_iter()
            .map(|k| candidates[k])
            .collect();
        negs.sort_unstable();

        train.push(positives);
        test_item.push(held_out);
        negatives.push(negs);
    }

    Ok(InteractionDataset {
        num_users: raw.num_users,
        num_items: raw.num_items,
        train,
        test_item,
        eval_negatives: negatives,
        user_ids: raw.user_ids.clone(),
        item_ids: raw.item_ids.clone(),
    })
}

/// Labeled training pairs for one local epoch: every training positive once
/// with label 1, each followed by `negatives_per_positive` uniform draws from
/// items outside the user's training positives, labeled 0.
///
/// Negatives are drawn with replacement across positives. The held-out item
/// is not a training positive and may be drawn, as in the usual NCF protocol.
pub fn sample_training_batch<R: Rng + ?Sized>(
    dataset: &InteractionDataset,
    user: usize,
    negatives_per_positive: usize,
    rng: &mut R,
) -> Vec<(u32, f64)> {
    let positives = &dataset.train[user];
    let n = dataset.num_items as u32;
    let room = dataset.num_items - positives.len();
    let mut out = Vec::with_capacity(positives.len() * (1 + negatives_per_positive));
    for &item in positives {
        out.push((item, 1.0));
        if room == 0 {
            continue;
        }
        for _ in 0..negatives_per_positive {
            let neg = loop {
                let candidate = rng.random_range(0..n);
                if positives.binary_search(&candidate).is_err() {
                    break candidate;
                }
            };
            out.push((neg, 0.0));
        }
    }
    out
}
