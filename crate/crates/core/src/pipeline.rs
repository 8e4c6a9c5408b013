//! End-to-end stages over a run directory: synthetic data, tokenizer
//! training, catalog tokenization, predictor training, evaluation,
//! decoding and ablation sweeps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_split, generate_synthetic_corpus, load_embeddings, load_interactions, EvalSplit, SplitCorpus,
    SyntheticConfig,
};
use crate::decode::{decode, DecodeConfig, Order};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, item_sids, train_prefixes, write_generations, write_results, EvalResult, Evaluation, Generation,
    ResultRow,
};
use crate::io::atomic_write;
use crate::nn::AttentionPattern;
use crate::predictor::{MaskPredictor, PredictorConfig, VocabLayout};
use crate::tokenizer::{tokenize_catalog, train_tokenizer, SidCatalog, TokenizerConfig, TokenizerModel, TokenizerReport};
use crate::training::{train, write_train_log, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub interactions: PathBuf,
    pub embeddings: PathBuf,
    /// Cluster labels written by `synth-data`.
    pub labels: PathBuf,
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            interactions: "data/interactions.jsonl".into(),
            embeddings: "data/embeddings.bin".into(),
            labels: "data/labels.jsonl".into(),
            workdir: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Users with fewer interactions are dropped.
    pub min_len: usize,
    /// Validation users decoded for early stopping; 0 means all.
    pub valid_users: usize,
    /// Test users evaluated; 0 means all.
    pub test_users: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_len: 3,
            valid_users: 0,
            test_users: 0,
        }
    }
}

/// Everything a run needs. The top-level `seed` is copied into every
/// component before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    pub seed: u64,
    pub paths: Paths,
    pub synth: SyntheticConfig,
    pub tokenizer: TokenizerConfig,
    pub predictor: PredictorConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// The config with the global seed propagated into every component.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.synth.seed = c.seed;
        c.tokenizer.seed = c.seed;
        c.predictor.seed = c.seed;
        c.train.seed = c.seed;
        if c.dataset.is_empty() {
            c.dataset = "synthetic".into();
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.predictor.validate()?;
        self.train.validate()?;
        self.decode.validate(self.tokenizer.heads)?;
        if self.eval.min_len < 3 {
            return Err(Error::Invalid(format!("eval.min_len must be at least 3, got {}", self.eval.min_len)));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<VocabLayout> {
        VocabLayout::new(self.tokenizer.heads, self.tokenizer.codebook_size)
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.paths.workdir.join(name)
    }
}

pub const TOKENIZER_FILE: &str = "tokenizer.ckpt";
pub const SIDS_FILE: &str = "sids.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const TOKENIZER_REPORT_FILE: &str = "tokenizer_report.json";

/// Fails with a validation error naming `path` when it does not exist.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("required file not found: {}", path.display())))
    }
}

pub fn synth_data(cfg: &RunConfig) -> Result<()> {
    let corpus = generate_synthetic_corpus(&cfg.synth)?;
    corpus.write(&cfg.paths.interactions, &cfg.paths.embeddings, &cfg.paths.labels)
}

pub fn train_tokenizer_stage(cfg: &RunConfig) -> Result<TokenizerReport> {
    require(&cfg.paths.embeddings)?;
    let emb = load_embeddings(&cfg.paths.embeddings)?;
    let trained = train_tokenizer(&emb, &cfg.tokenizer)?;
    trained.model.save(&cfg.artifact(TOKENIZER_FILE))?;
    let report = serde_json::to_vec_pretty(&trained.report)?;
    atomic_write(&cfg.artifact(TOKENIZER_REPORT_FILE), &report)?;
    Ok(trained.report)
}

pub fn tokenize_stage(cfg: &RunConfig) -> Result<SidCatalog> {
    let ckpt = cfg.artifact(TOKENIZER_FILE);
    require(&ckpt)?;
    require(&cfg.paths.embeddings)?;
    let model = TokenizerModel::<f32>::load(&ckpt)?;
    let emb = load_embeddings(&cfg.paths.embeddings)?;
    let catalog = tokenize_catalog(&emb, &model)?;
    catalog.save(&cfg.artifact(SIDS_FILE))?;
    Ok(catalog)
}

/// Split corpus and SID catalog of a run, checked against each other.
pub fn load_corpus(cfg: &RunConfig) -> Result<(SplitCorpus, SidCatalog)> {
    require(&cfg.paths.interactions)?;
    let sids = cfg.artifact(SIDS_FILE);
    require(&sids)?;
    let interactions = load_interactions(&cfg.paths.interactions)?;
    let corpus = build_split(&interactions, cfg.eval.min_len, cfg.predictor.max_items)?;
    if corpus.users.is_empty() {
        return Err(Error::Invalid(format!("no user has at least {} interactions", cfg.eval.min_len)));
    }
    let catalog = SidCatalog::load(&sids)?;
    if catalog.heads() != cfg.tokenizer.heads {
        return Err(Error::Invalid(format!(
            "{} has {} heads but tokenizer.heads is {}",
            sids.display(),
            catalog.heads(),
            cfg.tokenizer.heads
        )));
    }
    catalog.ensure_covers(corpus.items())?;
    Ok((corpus, catalog))
}

/// Deterministic subset of `count` user indices (all when 0 or too many),
/// in ascending order.
pub fn user_subset(total: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    if count == 0 || count >= total {
        return idx;
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_u64));
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

/// Trains a fresh predictor, early-stopping on validation Recall@10.
pub fn fit_predictor(
    cfg: &RunConfig,
    corpus: &SplitCorpus,
    catalog: &SidCatalog,
) -> Result<(MaskPredictor<f32>, TrainOutcome)> {
    let mut model = MaskPredictor::<f32>::new(cfg.predictor.clone(), cfg.vocab()?)?;
    let prefixes = train_prefixes(corpus, catalog)?;
    let valid = user_subset(corpus.users.len(), cfg.eval.valid_users, cfg.seed);
    let decode_cfg = cfg.decode.clone();
    let mut validate = |m: &MaskPredictor<f32>| -> Result<f64> {
        let e = evaluate(m, corpus, catalog, EvalSplit::Valid, &decode_cfg, Some(&valid))?;
        Ok(e.result.recall_at(10))
    };
    let outcome = train(&mut model, &prefixes, &cfg.train, &mut validate)?;
    Ok((model, outcome))
}

pub fn train_stage(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (corpus, catalog) = load_corpus(cfg)?;
    let (model, outcome) = fit_predictor(cfg, &corpus, &catalog)?;
    model.save(&cfg.artifact(MODEL_FILE))?;
    write_train_log(&cfg.artifact(TRAIN_LOG_FILE), &outcome.log)?;
    Ok(outcome)
}

fn load_model(cfg: &RunConfig) -> Result<MaskPredictor<f32>> {
    let path = cfg.artifact(MODEL_FILE);
    require(&path)?;
    let model = MaskPredictor::<f32>::load(&path)?;
    if model.layout.vocab != cfg.vocab()? {
        return Err(Error::Invalid(format!(
            "{} was trained for {:?}, config asks for {:?}",
            path.display(),
            model.layout.vocab,
            cfg.vocab()?
        )));
    }
    Ok(model)
}

/// Test-split evaluation of a model under `decode`.
pub fn test_evaluation(
    cfg: &RunConfig,
    model: &MaskPredictor<f32>,
    corpus: &SplitCorpus,
    catalog: &SidCatalog,
    decode_cfg: &DecodeConfig,
) -> Result<Evaluation> {
    let users = user_subset(corpus.users.len(), cfg.eval.test_users, cfg.seed.wrapping_add(1));
    evaluate(model, corpus, catalog, EvalSplit::Test, decode_cfg, Some(&users))
}

pub fn evaluate_stage(cfg: &RunConfig) -> Result<EvalResult> {
    let model = load_model(cfg)?;
    let (corpus, catalog) = load_corpus(cfg)?;
    let e = test_evaluation(cfg, &model, &corpus, &catalog, &cfg.decode)?;
    let row = ResultRow::new(&cfg.dataset, "dgrec", &cfg.decode, &e.result);
    write_results(&cfg.artifact(RESULTS_FILE), &[row])?;
    write_generations(&cfg.artifact(GENERATIONS_FILE), &e.generations)?;
    Ok(e.result)
}

/// Ranked generations for the test histories, without scoring.
pub fn decode_stage(cfg: &RunConfig) -> Result<Vec<Generation>> {
    let model = load_model(cfg)?;
    let (corpus, catalog) = load_corpus(cfg)?;
    let users = user_subset(corpus.users.len(), cfg.eval.test_users, cfg.seed.wrapping_add(1));
    let mut out = Vec::new();
    for &u in &users {
        let user = &corpus.users[u];
        let history = item_sids(&corpus.history(user, EvalSplit::Test), &catalog)?;
        let decoded = decode(&model, &history, &cfg.decode)?;
        out.extend(decoded.hypotheses.into_iter().enumerate().map(|(r, h)| Generation {
            user_id: user.user_id.clone(),
            rank: r + 1,
            sid: h.sid,
            logprob: h.logprob,
        }));
    }
    write_generations(&cfg.artifact(GENERATIONS_FILE), &out)?;
    Ok(out)
}

pub fn step_divisors(heads: usize) -> Vec<usize> {
    (1..=heads).filter(|t| heads % t == 0).collect()
}

/// Sweeps generation order, step count and attention pattern; one row per
/// setting. The trained model serves the order and step rows; every
/// attention pattern gets a freshly trained model.
pub fn ablate_stage(cfg: &RunConfig) -> Result<Vec<ResultRow>> {
    let started = Instant::now();
    let model = load_model(cfg)?;
    let (corpus, catalog) = load_corpus(cfg)?;
    let mut rows = Vec::new();
    for order in Order::ALL {
        let d = DecodeConfig { order, ..cfg.decode.clone() };
        let e = test_evaluation(cfg, &model, &corpus, &catalog, &d)?;
        rows.push(ResultRow::new(&cfg.dataset, "dgrec", &d, &e.result));
    }
    for steps in step_divisors(cfg.tokenizer.heads) {
        let d = DecodeConfig {
            steps,
            order: Order::Adaptive,
            ..cfg.decode.clone()
        };
        let e = test_evaluation(cfg, &model, &corpus, &catalog, &d)?;
        rows.push(ResultRow::new(&cfg.dataset, "dgrec", &d, &e.result));
    }
    for pattern in AttentionPattern::ALL {
        let mut c = cfg.clone();
        c.predictor.pattern = pattern;
        let (m, _) = fit_predictor(&c, &corpus, &catalog)?;
        let e = test_evaluation(&c, &m, &corpus, &catalog, &c.decode)?;
        rows.push(ResultRow::new(&cfg.dataset, &format!("dgrec-{}", pattern.name()), &c.decode, &e.result));
    }
    write_results(&cfg.artifact(RESULTS_FILE), &rows)?;
    log::info!("ablation finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(rows)
}
