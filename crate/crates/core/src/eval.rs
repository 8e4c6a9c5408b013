//! Leave-one-out ranking evaluation.
//!
//! Generated semantic IDs are expanded to catalog items, the target item's
//! rank is scored with Recall@k and NDCG@k, and the per-user values are
//! averaged.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{EvalSplit, SplitCorpus};
use crate::decode::{decode, BlockScorer, DecodeConfig};
use crate::error::{Error, Result};
use crate::io::{atomic_write, write_jsonl};
use crate::tokenizer::{SemanticId, SidCatalog};

pub const KS: [usize; 3] = [1, 5, 10];

/// Ranked items of a list of ranked SIDs, plus the number of SIDs that
/// matched no item. Colliding items share a SID's slot in ascending id
/// order and push later SIDs down.
pub fn sids_to_items(ranked: &[SemanticId], catalog: &SidCatalog) -> (Vec<String>, usize) {
    let mut items = Vec::new();
    let mut invalid = 0;
    for sid in ranked {
        let hits = catalog.items_for(sid);
        if hits.is_empty() {
            invalid += 1;
        }
        items.extend(hits.iter().cloned());
    }
    (items, invalid)
}

/// 1-based rank of `target` in `ranked`.
pub fn rank_of(ranked: &[String], target: &str) -> Option<usize> {
    ranked.iter().position(|i| i == target).map(|p| p + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserMetrics {
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

pub fn metrics(ranked: &[String], target: &str, ks: &[usize]) -> UserMetrics {
    let rank = rank_of(ranked, target);
    let hit = |k: usize| rank.filter(|&r| r <= k);
    UserMetrics {
        recall: ks.iter().map(|&k| if hit(k).is_some() { 1.0 } else { 0.0 }).collect(),
        ndcg: ks
            .iter()
            .map(|&k| hit(k).map_or(0.0, |r| 1.0 / ((r + 1) as f64).log2()))
            .collect(),
    }
}

/// Metrics averaged over users, at the cutoffs in [`KS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub recall: [f64; 3],
    pub ndcg: [f64; 3],
    pub users: usize,
    /// Users with fewer than `k` ranked items.
    pub shortfall: usize,
    /// Fraction of generated SIDs that match no catalog item.
    pub invalid_rate: f64,
}

impl EvalResult {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall[KS.iter().position(|&x| x == k).expect("k is one of KS")]
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg[KS.iter().position(|&x| x == k).expect("k is one of KS")]
    }
}

/// One generated block of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub user_id: String,
    pub rank: usize,
    pub sid: SemanticId,
    pub logprob: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub result: EvalResult,
    pub generations: Vec<Generation>,
}

pub fn item_sids(items: &[String], catalog: &SidCatalog) -> Result<Vec<SemanticId>> {
    items
        .iter()
        .map(|i| {
            catalog
                .sid(i)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("item {i:?} has no semantic ID")))
        })
        .collect()
}

/// Training prefixes of every user as SID sequences.
pub fn train_prefixes(corpus: &SplitCorpus, catalog: &SidCatalog) -> Result<Vec<Vec<SemanticId>>> {
    corpus.users.iter().map(|u| item_sids(u.train_prefix(), catalog)).collect()
}

struct UserOutcome {
    metrics: UserMetrics,
    generated: usize,
    invalid: usize,
    short: bool,
    generations: Vec<Generation>,
}

/// Decodes and scores the users at `users` (all users when `None`). Users
/// are processed in parallel; results are combined in user order.
pub fn evaluate<S: BlockScorer + Sync + ?Sized>(
    scorer: &S,
    corpus: &SplitCorpus,
    catalog: &SidCatalog,
    split: EvalSplit,
    config: &DecodeConfig,
    users: Option<&[usize]>,
) -> Result<Evaluation> {
    config.validate(scorer.vocab().heads)?;
    let all: Vec<usize>;
    let picked = match users {
        Some(u) => u,
        None => {
            all = (0..corpus.users.len()).collect();
            &all
        }
    };
    if picked.is_empty() {
        return Err(Error::Invalid("no users to evaluate".into()));
    }
    if let Some(&bad) = picked.iter().find(|&&u| u >= corpus.users.len()) {
        return Err(Error::Invalid(format!("user index {bad} out of range")));
    }
    let outcomes = picked
        .par_iter()
        .map(|&u| {
            let user = &corpus.users[u];
            let history = item_sids(&corpus.history(user, split), catalog)?;
            let decoded = decode(scorer, &history, config)?;
            let sids: Vec<SemanticId> = decoded.hypotheses.iter().map(|h| h.sid.clone()).collect();
            let (items, invalid) = sids_to_items(&sids, catalog);
            Ok(UserOutcome {
                metrics: metrics(&items, corpus.target(user, split), &KS),
                generated: sids.len(),
                invalid,
                short: items.len() < config.k,
                generations: decoded
                    .hypotheses
                    .into_iter()
                    .enumerate()
                    .map(|(r, h)| Generation {
                        user_id: user.user_id.clone(),
                        rank: r + 1,
                        sid: h.sid,
                        logprob: h.logprob,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<UserOutcome>>>()?;
    let n = outcomes.len() as f64;
    let mut result = EvalResult {
        recall: [0.0; 3],
        ndcg: [0.0; 3],
        users: outcomes.len(),
        shortfall: 0,
        invalid_rate: 0.0,
    };
    let (mut generated, mut invalid) = (0, 0);
    let mut generations = Vec::new();
    for o in outcomes {
        for i in 0..KS.len() {
            result.recall[i] += o.metrics.recall[i];
            result.ndcg[i] += o.metrics.ndcg[i];
        }
        generated += o.generated;
        invalid += o.invalid;
        result.shortfall += o.short as usize;
        generations.extend(o.generations);
    }
    for i in 0..KS.len() {
        result.recall[i] /= n;
        result.ndcg[i] /= n;
    }
    result.invalid_rate = if generated == 0 { 0.0 } else { invalid as f64 / generated as f64 };
    Ok(Evaluation { result, generations })
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub model: String,
    pub order: String,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "B")]
    pub beam: usize,
    #[serde(rename = "recall@1")]
    pub recall_1: f64,
    #[serde(rename = "recall@5")]
    pub recall_5: f64,
    #[serde(rename = "recall@10")]
    pub recall_10: f64,
    #[serde(rename = "ndcg@5")]
    pub ndcg_5: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg_10: f64,
    pub invalid_rate: f64,
    pub users: usize,
}

impl ResultRow {
    pub fn new(dataset: &str, model: &str, config: &DecodeConfig, r: &EvalResult) -> Self {
        Self {
            dataset: dataset.to_string(),
            model: model.to_string(),
            order: config.order.name().to_string(),
            steps: config.steps,
            beam: config.width(),
            recall_1: r.recall_at(1),
            recall_5: r.recall_at(5),
            recall_10: r.recall_at(10),
            ndcg_5: r.ndcg_at(5),
            ndcg_10: r.ndcg_at(10),
            invalid_rate: r.invalid_rate,
            users: r.users,
        }
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(format!("results table: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("results table: {e}")))?;
    atomic_write(path, &bytes)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_generations(path: &Path, generations: &[Generation]) -> Result<()> {
    write_jsonl(path, generations)
}
