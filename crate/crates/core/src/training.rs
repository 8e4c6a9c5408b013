//! Forward masking, the history-mask and item-mask losses, and the training
//! loop.
//!
//! Every training example is a history plus its target item. The item-mask
//! view keeps the history visible and masks next-item positions with ratio
//! `r`; the history-mask view masks history positions with its own `r` and
//! leaves the next-item block fully masked. Each view contributes
//! `-(1/r) Σ log p(true token)` over its masked positions, averaged over the
//! batch, and the objective is `item + λ · history`.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::nn::layers::log_softmax_in_place;
use crate::nn::{step_model, AdamWConfig, OptimizerState, Parameters, Scalar};
use crate::predictor::{assemble_input, weighted_cross_entropy, MaskPredictor, Query, SequenceLayout};
use crate::tokenizer::SemanticId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainTargets {
    /// Every item of the training prefix after the first, each with its own
    /// preceding history.
    #[default]
    All,
    /// Only the last item of the training prefix.
    Last,
    /// One uniformly drawn target per user and epoch.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the history-mask loss.
    pub lambda_his: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub targets: TrainTargets,
    /// Validate every this many epochs.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_his: 1.0,
            epochs: 150,
            lr: 1e-3,
            weight_decay: 0.005,
            batch_size: 1024,
            patience: 10,
            targets: TrainTargets::All,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_his >= 0.0) || !self.lambda_his.is_finite() {
            return Err(Error::Invalid(format!("lambda_his must be finite and non-negative, got {}", self.lambda_his)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Invalid("batch_size and eval_every must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Invalid("lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// One draw of the forward masking process.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub ratio: f64,
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
    pub original: Vec<usize>,
    pub masked: Vec<usize>,
}

/// Draws `r ~ U(0, 1)` (or uses `forced_ratio`) and masks each eligible
/// position independently with probability `r`, redrawing everything
/// until at least one position is masked.
pub fn sample_mask<R: Rng + ?Sized>(
    tokens: &[usize],
    eligible: &[usize],
    mask_token: usize,
    forced_ratio: Option<f64>,
    rng: &mut R,
) -> Result<MaskSample> {
    if eligible.is_empty() {
        return Err(Error::Invalid("no eligible positions to mask".into()));
    }
    if let Some(&p) = eligible.iter().find(|&&p| p >= tokens.len()) {
        return Err(Error::Invalid(format!("eligible position {p} outside sequence")));
    }
    if let Some(r) = forced_ratio {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Invalid(format!("forced masking ratio {r} outside (0, 1]")));
        }
    }
    loop {
        let ratio = match forced_ratio {
            Some(r) => r,
            None => rng.gen::<f64>(),
        };
        if ratio <= 0.0 {
            continue;
        }
        let positions: Vec<usize> = eligible.iter().copied().filter(|_| rng.gen::<f64>() < ratio).collect();
        if positions.is_empty() {
            continue;
        }
        let mut positions = positions;
        positions.sort_unstable();
        let mut masked = tokens.to_vec();
        for &p in &positions {
            masked[p] = mask_token;
        }
        return Ok(MaskSample {
            ratio,
            positions,
            original: tokens.to_vec(),
            masked,
        });
    }
}

/// A history (oldest first, at most `max_items` long) and its target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub history: Vec<SemanticId>,
    pub target: SemanticId,
}

fn example(sids: &[SemanticId], j: usize, max_items: usize) -> TrainExample {
    TrainExample {
        history: sids[j.saturating_sub(max_items)..j].to_vec(),
        target: sids[j].clone(),
    }
}

/// Training examples of one epoch from each user's training prefix.
pub fn epoch_examples<R: Rng + ?Sized>(
    prefixes: &[Vec<SemanticId>],
    targets: TrainTargets,
    max_items: usize,
    rng: &mut R,
) -> Vec<TrainExample> {
    let mut out = Vec::new();
    for sids in prefixes.iter().filter(|s| s.len() >= 2) {
        match targets {
            TrainTargets::All => out.extend((1..sids.len()).map(|j| example(sids, j, max_items))),
            TrainTargets::Last => out.push(example(sids, sids.len() - 1, max_items)),
            TrainTargets::Random => {
                let j = rng.gen_range(1..sids.len());
                out.push(example(sids, j, max_items));
            }
        }
    }
    out
}

/// Which loss a packed query belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Item,
    History,
}

/// Masked sequences of a batch, ready for one packed forward pass.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub seqs: Vec<Vec<usize>>,
    pub queries: Vec<Query>,
    /// Target code of each query within its head block.
    pub targets: Vec<usize>,
    /// `1 / r` of the query's sequence.
    pub inv_ratio: Vec<f64>,
    pub terms: Vec<Term>,
    pub examples: usize,
}

/// Which masked views [`prepare_batch`] builds per example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Views {
    pub item: bool,
    pub history: bool,
}

/// Builds the requested masked views of every example. The history view is
/// skipped for examples without history.
pub fn prepare_batch<R: Rng + ?Sized>(
    examples: &[TrainExample],
    layout: &SequenceLayout,
    views: Views,
    forced_ratio: Option<f64>,
    rng: &mut R,
) -> Result<PreparedBatch> {
    let vocab = layout.vocab;
    let m = vocab.heads;
    let mut b = PreparedBatch {
        seqs: Vec::new(),
        queries: Vec::new(),
        targets: Vec::new(),
        inv_ratio: Vec::new(),
        terms: Vec::new(),
        examples: examples.len(),
    };
    let next = layout.next_block();
    let all_masked = vec![vocab.mask(); m];
    for ex in examples {
        if views.item {
            let target: Vec<usize> = ex.target.iter().enumerate().map(|(h, &c)| vocab.token(h, c)).collect();
            let full = assemble_input(&ex.history, &target, layout)?;
            let eligible: Vec<usize> = next.clone().collect();
            let s = sample_mask(&full, &eligible, vocab.mask(), forced_ratio, rng)?;
            push_view(&mut b, &s, Term::Item, layout);
        }
        if views.history && !ex.history.is_empty() {
            let tokens = assemble_input(&ex.history, &all_masked, layout)?;
            let eligible: Vec<usize> = (0..next.start).filter(|&p| tokens[p] != vocab.pad()).collect();
            let s = sample_mask(&tokens, &eligible, vocab.mask(), forced_ratio, rng)?;
            push_view(&mut b, &s, Term::History, layout);
        }
    }
    Ok(b)
}

fn push_view(b: &mut PreparedBatch, s: &MaskSample, term: Term, layout: &SequenceLayout) {
    let idx = b.seqs.len();
    for &p in &s.positions {
        b.queries.push((idx, p));
        b.targets.push(layout.vocab.code_of(s.original[p]).expect("masked positions hold codes"));
        b.inv_ratio.push(1.0 / s.ratio);
        b.terms.push(term);
    }
    b.seqs.push(s.masked.clone());
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BatchLoss {
    pub total: f64,
    pub item: f64,
    pub history: f64,
}

/// Loss of a prepared batch, `item_weight · item + his_weight · history`.
/// With `backward`, the gradient of that weighted sum is accumulated into
/// the model.
pub fn batch_loss<T: Scalar>(
    model: &mut MaskPredictor<T>,
    batch: &PreparedBatch,
    item_weight: f64,
    his_weight: f64,
    backward: bool,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchLoss> {
    if batch.examples == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let n = batch.examples as f64;
    if batch.seqs.is_empty() {
        return Ok(BatchLoss::default());
    }
    let refs: Vec<&[usize]> = batch.seqs.iter().map(Vec::as_slice).collect();
    let (logits, cache) = model.forward(&refs, &batch.queries, dropout_rng)?;
    let (mut item, mut history) = (0.0, 0.0);
    for (i, &t) in batch.targets.iter().enumerate() {
        let mut row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
        log_softmax_in_place(&mut row);
        let l = -row[t] * batch.inv_ratio[i] / n;
        match batch.terms[i] {
            Term::Item => item += l,
            Term::History => history += l,
        }
    }
    let total = item_weight * item + his_weight * history;
    if !total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    if backward {
        let weights: Vec<f64> = batch
            .inv_ratio
            .iter()
            .zip(&batch.terms)
            .map(|(&ir, &term)| {
                let w = match term {
                    Term::Item => item_weight,
                    Term::History => his_weight,
                };
                w * ir / n
            })
            .collect();
        let (_, dl) = weighted_cross_entropy(&logits, &batch.targets, &weights);
        model.backward(&cache, &dl)?;
    }
    Ok(BatchLoss { total, item, history })
}

/// Item-mask loss of a batch of examples (no gradient).
pub fn loss_item_mask<T: Scalar, R: Rng + ?Sized>(
    model: &mut MaskPredictor<T>,
    examples: &[TrainExample],
    forced_ratio: Option<f64>,
    rng: &mut R,
) -> Result<f64> {
    let layout = model.layout;
    let views = Views { item: true, history: false };
    let b = prepare_batch(examples, &layout, views, forced_ratio, rng)?;
    Ok(batch_loss(model, &b, 1.0, 0.0, false, None)?.item)
}

/// History-mask loss of a batch of examples (no gradient), averaged over
/// the examples that have a history.
pub fn loss_his_mask<T: Scalar, R: Rng + ?Sized>(
    model: &mut MaskPredictor<T>,
    examples: &[TrainExample],
    forced_ratio: Option<f64>,
    rng: &mut R,
) -> Result<f64> {
    let layout = model.layout;
    let with_history: Vec<TrainExample> = examples.iter().filter(|e| !e.history.is_empty()).cloned().collect();
    let views = Views { item: false, history: true };
    let b = prepare_batch(&with_history, &layout, views, forced_ratio, rng)?;
    Ok(batch_loss(model, &b, 0.0, 1.0, false, None)?.history)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_item: f64,
    pub loss_his: f64,
    #[serde(rename = "val_recall@10")]
    pub val_recall_10: Option<f64>,
    pub wall_ms: u128,
}

pub fn write_train_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(format!("train log: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("train log: {e}")))?;
    atomic_write(path, &bytes)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub steps: usize,
}

/// Per-(epoch, batch) mask stream so batch contents never depend on how
/// many random numbers earlier batches consumed.
fn batch_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((epoch as u64) << 32) | batch as u64);
    r
}

/// Trains `model` in place. `validate` returns validation Recall@10; the
/// parameters of the best validated epoch are restored at the end.
pub fn train(
    model: &mut MaskPredictor<f32>,
    prefixes: &[Vec<SemanticId>],
    config: &TrainConfig,
    validate: &mut dyn FnMut(&MaskPredictor<f32>) -> Result<f64>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let layout = model.layout;
    let mut opt = OptimizerState::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let views = Views {
        item: true,
        history: config.lambda_his > 0.0,
    };
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Vec<f32>)> = None;
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut examples = epoch_examples(prefixes, config.targets, layout.max_items, &mut order_rng);
        if examples.is_empty() {
            return Err(Error::Invalid("no training examples: every training prefix is shorter than 2".into()));
        }
        examples.shuffle(&mut order_rng);
        let mut sums = BatchLoss::default();
        for (bi, chunk) in examples.chunks(config.batch_size).enumerate() {
            let mut rng = batch_rng(config.seed, epoch, bi);
            let batch = prepare_batch(chunk, &layout, views, None, &mut rng)?;
            model.zero_grad();
            let dropout = (model.config.dropout > 0.0).then_some(&mut dropout_rng);
            let loss = batch_loss(model, &batch, 1.0, config.lambda_his, true, dropout).map_err(|e| {
                log::error!("loss failure at step {step}: {e}");
                Error::Diverged {
                    step,
                    message: e.to_string(),
                }
            })?;
            step_model(model, &mut opt)?;
            step += 1;
            let w = chunk.len() as f64 / examples.len() as f64;
            sums.total += w * loss.total;
            sums.item += w * loss.item;
            sums.history += w * loss.history;
        }
        let val = if (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs {
            Some(validate(model)?)
        } else {
            None
        };
        log::info!(
            "epoch {epoch} loss {:.4} (item {:.4}, history {:.4}) val {:?}",
            sums.total,
            sums.item,
            sums.history,
            val
        );
        log.push(LogRow {
            epoch,
            step,
            loss_total: sums.total,
            loss_item: sums.item,
            loss_his: sums.history,
            val_recall_10: val,
            wall_ms: start.elapsed().as_millis(),
        });
        if let Some(v) = val {
            if best.as_ref().map_or(true, |b| v > b.1) {
                best = Some((epoch, v, model.flat_values()));
                since_best = 0;
            } else {
                since_best += config.eval_every;
                if config.patience > 0 && since_best >= config.patience {
                    log::info!("early stop at epoch {epoch}");
                    break;
                }
            }
        }
    }
    let (best_epoch, best_val) = match best {
        Some((e, v, params)) => {
            model.load_flat(&params)?;
            (Some(e), Some(v))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val,
        steps: step,
    })
}
