//! Interaction logs, item embeddings, the leave-one-out split and the
//! seeded synthetic corpus.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, write_jsonl};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Deserialize)]
struct RawInteraction {
    user_id: Option<String>,
    item_id: Option<String>,
    timestamp: Option<i64>,
}

/// Parses JSON-lines interactions. Blank lines are skipped; exact duplicate
/// `(user, item, timestamp)` rows keep their first occurrence.
pub fn parse_interactions(text: &str, path: &Path) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let raw: RawInteraction = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let rec = Interaction {
            user_id: raw.user_id.ok_or_else(|| err("missing user_id".into()))?,
            item_id: raw.item_id.ok_or_else(|| err("missing item_id".into()))?,
            timestamp: raw.timestamp.ok_or_else(|| err("missing timestamp".into()))?,
        };
        if seen.insert(rec.clone()) {
            out.push(rec);
        }
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "no interactions".into(),
        });
    }
    Ok(out)
}

pub fn load_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, path)
}

pub fn write_interactions(path: &Path, rows: &[Interaction]) -> Result<()> {
    write_jsonl(path, rows)
}

/// One user's chronological sequence, at least `min_len` items long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user_id: String,
    pub sequence: Vec<String>,
    max_history: usize,
}

fn recent(items: &[String], max: usize) -> &[String] {
    &items[items.len().saturating_sub(max)..]
}

impl UserSplit {
    /// Items available for training, left-truncated to `max_history`.
    pub fn train_prefix(&self) -> &[String] {
        recent(&self.sequence[..self.sequence.len() - 2], self.max_history)
    }

    pub fn valid_target(&self) -> &str {
        &self.sequence[self.sequence.len() - 2]
    }

    pub fn valid_history(&self) -> &[String] {
        self.train_prefix()
    }

    pub fn test_target(&self) -> &str {
        &self.sequence[self.sequence.len() - 1]
    }

    pub fn test_history(&self) -> &[String] {
        recent(&self.sequence[..self.sequence.len() - 1], self.max_history)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitCorpus {
    pub users: Vec<UserSplit>,
    pub max_history: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalSplit {
    #[serde(rename = "valid")]
    Valid,
    #[serde(rename = "test")]
    Test,
}

impl SplitCorpus {
    pub fn history(&self, user: &UserSplit, split: EvalSplit) -> Vec<String> {
        match split {
            EvalSplit::Valid => user.valid_history().to_vec(),
            EvalSplit::Test => user.test_history().to_vec(),
        }
    }

    pub fn target<'a>(&self, user: &'a UserSplit, split: EvalSplit) -> &'a str {
        match split {
            EvalSplit::Valid => user.valid_target(),
            EvalSplit::Test => user.test_target(),
        }
    }

    pub fn items(&self) -> impl Iterator<Item = &str> {
        self.users.iter().flat_map(|u| u.sequence.iter().map(String::as_str))
    }
}

/// Leave-one-out split: per user, sort ascending by timestamp (ties keep
/// input order), drop users shorter than `min_len`; the last item is the
/// test target and the second-to-last the validation target. Users are
/// ordered by id.
pub fn build_split(
    interactions: &[Interaction],
    min_len: usize,
    max_history: usize,
) -> Result<SplitCorpus> {
    if min_len < 3 {
        return Err(Error::Invalid(format!("min_len must be at least 3, got {min_len}")));
    }
    if max_history == 0 {
        return Err(Error::Invalid("max_history must be positive".into()));
    }
    let mut per_user: BTreeMap<&str, Vec<(i64, usize, &str)>> = BTreeMap::new();
    for (i, r) in interactions.iter().enumerate() {
        per_user
            .entry(&r.user_id)
            .or_default()
            .push((r.timestamp, i, &r.item_id));
    }
    let users = per_user
        .into_iter()
        .filter(|(_, rows)| rows.len() >= min_len)
        .map(|(user, mut rows)| {
            rows.sort_by_key(|&(ts, i, _)| (ts, i));
            UserSplit {
                user_id: user.to_string(),
                sequence: rows.into_iter().map(|(_, _, it)| it.to_string()).collect(),
                max_history,
            }
        })
        .collect();
    Ok(SplitCorpus { users, max_history })
}

/// Precomputed item vectors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddings {
    dim: usize,
    ids: Vec<String>,
    values: Vec<f32>,
    index: HashMap<String, usize>,
}

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";

impl ItemEmbeddings {
    pub fn new(dim: usize, rows: Vec<(String, Vec<f32>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        let mut ids = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len() * dim);
        let mut index = HashMap::with_capacity(rows.len());
        for (id, v) in rows {
            if v.len() != dim {
                return Err(Error::Invalid(format!(
                    "item {id:?} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("embedding of {id:?}")));
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::Invalid(format!("duplicate embedding for {id:?}")));
            }
            ids.push(id);
            values.extend(v);
        }
        Ok(Self {
            dim,
            ids,
            values,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.vector(i))
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Every item must have a vector.
    pub fn ensure_covers<'a>(&self, items: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for it in items {
            if !self.index.contains_key(it) {
                return Err(Error::MissingItem(it.to_string()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.values.len() * 4 + self.ids.len() * 8);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in self.vector(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message,
        };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).map_err(&err)? != EMBEDDING_MAGIC {
            return Err(err("missing EMB1 magic".into()));
        }
        let count = cur.u32().map_err(&err)? as usize;
        let dim = cur.u32().map_err(&err)? as usize;
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            let n = cur.u16().map_err(&err)? as usize;
            let id = std::str::from_utf8(cur.take(n).map_err(&err)?)
                .map_err(|e| err(format!("item id: {e}")))?
                .to_string();
            let raw = cur.take(4 * dim).map_err(&err)?;
            let v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            rows.push((id, v));
        }
        if cur.pos != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Self::new(dim, rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
}

pub fn load_embeddings(path: &Path) -> Result<ItemEmbeddings> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ItemEmbeddings::from_bytes(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub seq_len: usize,
    pub n_clusters: usize,
    pub dim: usize,
    /// Within-cluster standard deviation around unit-variance centers.
    pub noise: f64,
    /// Probability mass on each cluster's planted successor.
    pub peak: f64,
    /// Zipf exponent of item popularity inside a cluster.
    pub popularity: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_items: 1000,
            n_users: 5000,
            seq_len: 10,
            n_clusters: 20,
            dim: 64,
            noise: 0.25,
            peak: 0.8,
            popularity: 1.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub interactions: Vec<Interaction>,
    pub embeddings: ItemEmbeddings,
    /// Cluster of each item, in embedding order.
    pub labels: Vec<usize>,
    /// Planted cluster transition matrix, rows sum to one.
    pub transition: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct ClusterLabel<'a> {
    item_id: &'a str,
    cluster: usize,
}

impl SyntheticCorpus {
    pub fn write(&self, interactions: &Path, embeddings: &Path, labels: &Path) -> Result<()> {
        write_interactions(interactions, &self.interactions)?;
        self.embeddings.save(embeddings)?;
        write_jsonl(
            labels,
            self.embeddings
                .ids()
                .iter()
                .zip(&self.labels)
                .map(|(item_id, &cluster)| ClusterLabel { item_id, cluster }),
        )
    }
}

pub fn item_name(i: usize) -> String {
    format!("i{i:05}")
}

pub fn user_name(u: usize) -> String {
    format!("u{u:06}")
}

/// Gaussian item clusters and users walking a first-order Markov chain
/// over clusters. Each cluster has one planted successor carrying `peak`
/// mass; the rest is spread uniformly. Items within a cluster are drawn by
/// Zipf popularity.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.n_clusters == 0 || cfg.n_clusters > cfg.n_items {
        return Err(Error::Invalid(format!(
            "need 1 <= n_clusters <= n_items, got {} clusters for {} items",
            cfg.n_clusters, cfg.n_items
        )));
    }
    if !(0.0..=1.0).contains(&cfg.peak) {
        return Err(Error::Invalid(format!("peak {} outside [0, 1]", cfg.peak)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.n_clusters;

    let centers: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let labels: Vec<usize> = (0..cfg.n_items).map(|i| i % c).collect();
    let rows = labels
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let v = centers[k]
                .iter()
                .map(|&m| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (m + cfg.noise * e) as f32
                })
                .collect();
            (item_name(i), v)
        })
        .collect();
    let embeddings = ItemEmbeddings::new(cfg.dim, rows)?;

    let mut successor: Vec<usize> = (0..c).collect();
    successor.shuffle(&mut rng);
    let transition: Vec<Vec<f64>> = (0..c)
        .map(|a| {
            let mut row = vec![(1.0 - cfg.peak) / c as f64; c];
            row[successor[a]] += cfg.peak;
            row
        })
        .collect();
    let row_samplers = transition
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| Error::Invalid(e.to_string())))
        .collect::<Result<Vec<_>>>()?;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &k) in labels.iter().enumerate() {
        members[k].push(i);
    }
    let item_samplers = members
        .iter()
        .map(|m| {
            let w: Vec<f64> = (0..m.len())
                .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.popularity))
                .collect();
            WeightedIndex::new(w).map_err(|e| Error::Invalid(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut interactions = Vec::with_capacity(cfg.n_users * cfg.seq_len);
    for u in 0..cfg.n_users {
        let user_id = user_name(u);
        let mut ts: i64 = 1_600_000_000 + rng.gen_range(0..1_000_000);
        let mut cluster = rng.gen_range(0..c);
        for step in 0..cfg.seq_len {
            if step > 0 {
                cluster = row_samplers[cluster].sample(&mut rng);
                ts += rng.gen_range(1..86_400);
            }
            let item = members[cluster][item_samplers[cluster].sample(&mut rng)];
            interactions.push(Interaction {
                user_id: user_id.clone(),
                item_id: item_name(item),
                timestamp: ts,
            });
        }
    }
    Ok(SyntheticCorpus {
        interactions,
        embeddings,
        labels,
        transition,
    })
}
