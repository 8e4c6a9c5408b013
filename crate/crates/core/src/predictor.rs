//! The mask predictor: a transformer encoder over history tokens plus the
//! next-item block, emitting a distribution over the codes of the head that
//! owns each position.
//!
//! Sequences are packed into one row stack per call. Padding positions are
//! dropped before the network runs, so they neither attend nor are attended
//! to; positional embeddings keep the original absolute positions.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::gradcheck::{random_vec, FnOp, GradCase, RegisteredOp};
use crate::nn::layers::{log_softmax_in_place, softmax_cross_entropy, LayerNormCache};
use crate::nn::scalar::{gemm, MatRef, NEG_LARGE};
use crate::nn::tensor::join;
use crate::nn::{
    AttentionMask, AttentionPattern, Checkpoint, Embedding, LayerNorm, Linear, Param, Parameters,
    Scalar, Segment, Tensor, TransformerBlock,
};
use crate::tokenizer::SemanticId;

/// Token ids: code `c` of head `m` is `m·K + c`, then `[MASK]`, then `[PAD]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub heads: usize,
    pub codebook_size: usize,
}

impl VocabLayout {
    pub fn new(heads: usize, codebook_size: usize) -> Result<Self> {
        if heads == 0 || codebook_size == 0 {
            return Err(Error::Invalid("vocabulary needs at least one head and one code".into()));
        }
        Ok(Self {
            heads,
            codebook_size,
        })
    }

    pub fn mask(&self) -> usize {
        self.heads * self.codebook_size
    }

    pub fn pad(&self) -> usize {
        self.mask() + 1
    }

    pub fn size(&self) -> usize {
        self.mask() + 2
    }

    pub fn token(&self, head: usize, code: usize) -> usize {
        head * self.codebook_size + code
    }

    pub fn head_block(&self, head: usize) -> Range<usize> {
        head * self.codebook_size..(head + 1) * self.codebook_size
    }

    pub fn head_of(&self, token: usize) -> Option<usize> {
        (token < self.mask()).then(|| token / self.codebook_size)
    }

    pub fn code_of(&self, token: usize) -> Option<usize> {
        (token < self.mask()).then(|| token % self.codebook_size)
    }
}

/// `max_items` history slots of `M` positions each, then the `M`-position
/// next-item block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub vocab: VocabLayout,
    pub max_items: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        (self.max_items + 1) * self.vocab.heads
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn item_of(&self, pos: usize) -> usize {
        pos / self.vocab.heads
    }

    pub fn offset_of(&self, pos: usize) -> usize {
        pos % self.vocab.heads
    }

    pub fn next_block(&self) -> Range<usize> {
        self.max_items * self.vocab.heads..self.len()
    }

    /// Checks every token id and that code tokens sit at their head's offset.
    pub fn validate(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.len() {
            return Err(Error::Shape(format!(
                "sequence of {} tokens, layout expects {}",
                tokens.len(),
                self.len()
            )));
        }
        for (p, &t) in tokens.iter().enumerate() {
            if t >= self.vocab.size() {
                return Err(Error::Invalid(format!("token {t} at position {p} outside vocabulary")));
            }
            if let Some(h) = self.vocab.head_of(t) {
                if h != self.offset_of(p) {
                    return Err(Error::Invalid(format!(
                        "head-{h} token {t} at position {p} with offset {}",
                        self.offset_of(p)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// History SIDs left-padded to `max_items`, followed by `next_block`.
pub fn assemble_input(history: &[SemanticId], next_block: &[usize], layout: &SequenceLayout) -> Result<Vec<usize>> {
    let (m, vocab) = (layout.vocab.heads, layout.vocab);
    if history.len() > layout.max_items {
        return Err(Error::Invalid(format!(
            "history of {} items exceeds {} slots",
            history.len(),
            layout.max_items
        )));
    }
    if next_block.len() != m {
        return Err(Error::Shape(format!("next block of {} tokens for {m} heads", next_block.len())));
    }
    let mut tokens = vec![vocab.pad(); (layout.max_items - history.len()) * m];
    for sid in history {
        if sid.len() != m {
            return Err(Error::Shape(format!("SID of length {} for {m} heads", sid.len())));
        }
        for (h, &c) in sid.iter().enumerate() {
            if c >= vocab.codebook_size {
                return Err(Error::Invalid(format!("code {c} out of range for head {h}")));
            }
            tokens.push(vocab.token(h, c));
        }
    }
    tokens.extend_from_slice(next_block);
    layout.validate(&tokens)?;
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub layers: usize,
    pub d_model: usize,
    /// Attention heads.
    pub heads: usize,
    pub ffn_dim: usize,
    pub pattern: AttentionPattern,
    pub dropout: f64,
    /// History slots in the input layout.
    pub max_items: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 256,
            heads: 8,
            ffn_dim: 1024,
            pattern: AttentionPattern::Bidirectional,
            dropout: 0.0,
            max_items: 20,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Invalid("predictor needs at least one layer".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} not divisible by {} attention heads",
                self.d_model, self.heads
            )));
        }
        if self.ffn_dim == 0 || self.max_items == 0 {
            return Err(Error::Invalid("ffn_dim and max_items must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// A position whose head-block logits are wanted: `(sequence, position)`.
pub type Query = (usize, usize);

#[derive(Debug, Clone)]
pub struct MaskPredictor<T> {
    pub config: PredictorConfig,
    pub layout: SequenceLayout,
    pub token_emb: Embedding<T>,
    pub pos_emb: Embedding<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub ln_final: LayerNorm<T>,
    /// `[d_model × M·K]`; position offset `m` reads columns of head `m` only.
    pub output: Linear<T>,
}

pub struct PredictorCache<T> {
    token_ids: Vec<usize>,
    pos_ids: Vec<usize>,
    segments: Vec<Segment>,
    blocks: Vec<crate::nn::attention::BlockCache<T>>,
    ln_final: LayerNormCache<T>,
    hidden: Tensor<T>,
    /// Per head: packed row index of each query, in query order.
    groups: Vec<Vec<(usize, usize)>>,
}

/// Packed-row index of every kept position, per sequence.
struct Packing {
    token_ids: Vec<usize>,
    pos_ids: Vec<usize>,
    segments: Vec<Segment>,
    row_of: Vec<Vec<Option<usize>>>,
}

impl<T: Scalar> MaskPredictor<T> {
    pub fn new(config: PredictorConfig, vocab: VocabLayout) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layout = SequenceLayout {
            vocab,
            max_items: config.max_items,
        };
        let d = config.d_model;
        let token_emb = Embedding::new(vocab.size(), d, 0.02, &mut rng);
        let pos_emb = Embedding::new(layout.len(), d, 0.02, &mut rng);
        let blocks = (0..config.layers)
            .map(|_| TransformerBlock::new(d, config.heads, config.ffn_dim, config.dropout, &mut rng))
            .collect::<Result<_>>()?;
        let output = Linear::new(d, vocab.mask(), &mut rng);
        Ok(Self {
            config,
            layout,
            token_emb,
            pos_emb,
            blocks,
            ln_final: LayerNorm::new(d),
            output,
        })
    }

    pub fn vocab(&self) -> VocabLayout {
        self.layout.vocab
    }

    fn pack(&self, seqs: &[&[usize]]) -> Result<Packing> {
        let pad = self.vocab().pad();
        let mut p = Packing {
            token_ids: Vec::new(),
            pos_ids: Vec::new(),
            segments: Vec::with_capacity(seqs.len()),
            row_of: Vec::with_capacity(seqs.len()),
        };
        for tokens in seqs {
            self.layout.validate(tokens)?;
            let start = p.token_ids.len();
            let mut rows = vec![None; tokens.len()];
            let mut items = Vec::new();
            for (pos, &t) in tokens.iter().enumerate() {
                if t != pad {
                    rows[pos] = Some(p.token_ids.len());
                    p.token_ids.push(t);
                    p.pos_ids.push(pos);
                    items.push(self.layout.item_of(pos));
                }
            }
            if items.is_empty() {
                return Err(Error::Invalid("sequence consists only of padding".into()));
            }
            let mask = AttentionMask::build(self.config.pattern, &items, &vec![false; items.len()])?;
            p.segments.push(Segment { start, mask });
            p.row_of.push(rows);
        }
        Ok(p)
    }

    /// Runs the network on a packed batch and returns, per query, the
    /// logits over the `K` codes of the queried position's head.
    pub fn forward(
        &self,
        seqs: &[&[usize]],
        queries: &[Query],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<T>, PredictorCache<T>)> {
        let packing = self.pack(seqs)?;
        let mut x = self.token_emb.forward(&packing.token_ids)?;
        x.add_assign(&self.pos_emb.forward(&packing.pos_ids)?)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let r = rng.as_deref_mut().map(|r| r as &mut dyn RngCore);
            let (y, c) = block.forward(&x, &packing.segments, r)?;
            caches.push(c);
            x = y;
        }
        let (hidden, ln_cache) = self.ln_final.forward(&x)?;

        let (m, k) = (self.vocab().heads, self.vocab().codebook_size);
        let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m];
        for (qi, &(s, pos)) in queries.iter().enumerate() {
            let row = packing
                .row_of
                .get(s)
                .and_then(|r| r.get(pos).copied().flatten())
                .ok_or_else(|| Error::Invalid(format!("query ({s}, {pos}) is padding or out of range")))?;
            groups[self.layout.offset_of(pos)].push((qi, row));
        }
        let d = self.config.d_model;
        let mut logits = Tensor::zeros(&[queries.len(), k]);
        for (h, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let gathered = gather_rows(&hidden, group.iter().map(|&(_, r)| r));
            let mut out = vec![T::zero(); group.len() * k];
            if let Some(b) = &self.output.bias {
                for row in out.chunks_mut(k) {
                    row.copy_from_slice(&b.value.data()[h * k..(h + 1) * k]);
                }
            }
            gemm(
                T::one(),
                MatRef::new(&gathered, group.len(), d),
                MatRef::new(&self.output.weight.value.data()[h * k..], d, k).with_ld(m * k),
                T::one(),
                &mut out,
                k,
            );
            for (i, &(qi, _)) in group.iter().enumerate() {
                logits.row_mut(qi).copy_from_slice(&out[i * k..(i + 1) * k]);
            }
        }
        logits.ensure_finite("predictor logits")?;
        Ok((
            logits,
            PredictorCache {
                token_ids: packing.token_ids,
                pos_ids: packing.pos_ids,
                segments: packing.segments,
                blocks: caches,
                ln_final: ln_cache,
                hidden,
                groups,
            },
        ))
    }

    /// Accumulates parameter gradients given `d loss / d logits` per query.
    pub fn backward(&mut self, cache: &PredictorCache<T>, dlogits: &Tensor<T>) -> Result<()> {
        let (m, k) = (self.vocab().heads, self.vocab().codebook_size);
        let d = self.config.d_model;
        let mut dhidden = Tensor::zeros(cache.hidden.shape());
        for (h, group) in cache.groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let gathered = gather_rows(&cache.hidden, group.iter().map(|&(_, r)| r));
            let dl = gather_rows(dlogits, group.iter().map(|&(q, _)| q));
            let n = group.len();
            gemm(
                T::one(),
                MatRef::t(&gathered, n, d),
                MatRef::new(&dl, n, k),
                T::one(),
                &mut self.output.weight.grad.data_mut()[h * k..],
                m * k,
            );
            if let Some(b) = &mut self.output.bias {
                let db = &mut b.grad.data_mut()[h * k..(h + 1) * k];
                for row in dl.chunks(k) {
                    for (g, v) in db.iter_mut().zip(row) {
                        *g += *v;
                    }
                }
            }
            let mut dh = vec![T::zero(); n * d];
            gemm(
                T::one(),
                MatRef::new(&dl, n, k),
                MatRef::t(&self.output.weight.value.data()[h * k..], d, k).with_ld(m * k),
                T::zero(),
                &mut dh,
                d,
            );
            for (i, &(_, r)) in group.iter().enumerate() {
                for (acc, v) in dhidden.row_mut(r).iter_mut().zip(&dh[i * d..(i + 1) * d]) {
                    *acc += *v;
                }
            }
        }
        let mut dx = self.ln_final.backward(&cache.ln_final, &dhidden);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = block.backward(bc, &cache.segments, &dx)?;
        }
        self.token_emb.backward(&cache.token_ids, &dx);
        self.pos_emb.backward(&cache.pos_ids, &dx);
        Ok(())
    }

    /// Log-probabilities over the head block of each query (inference).
    pub fn head_log_probs(&self, seqs: &[&[usize]], queries: &[Query]) -> Result<Vec<Vec<f64>>> {
        let (logits, _) = self.forward(seqs, queries, None)?;
        Ok((0..logits.rows())
            .map(|i| {
                let mut row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
                log_softmax_in_place(&mut row);
                row
            })
            .collect())
    }

    /// Full `[L × vocab]` logits of one sequence. Outside the head block of
    /// each position's offset, logits are `NEG_LARGE`; padding positions
    /// carry a constant uniform head block.
    pub fn predict(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let vocab = self.vocab();
        let queries: Vec<Query> = tokens
            .iter()
            .enumerate()
            .filter(|&(_, &t)| t != vocab.pad())
            .map(|(p, _)| (0, p))
            .collect();
        let (logits, _) = self.forward(&[tokens], &queries, None)?;
        let mut full = Tensor::full(&[tokens.len(), vocab.size()], T::of(NEG_LARGE));
        for p in 0..tokens.len() {
            let block = vocab.head_block(self.layout.offset_of(p));
            full.row_mut(p)[block].fill(T::zero());
        }
        for (qi, &(_, p)) in queries.iter().enumerate() {
            let block = vocab.head_block(self.layout.offset_of(p));
            full.row_mut(p)[block].copy_from_slice(logits.row(qi));
        }
        Ok(full)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::json!({
            "kind": "predictor",
            "vocab": self.vocab(),
            "predictor": self.config,
        });
        let mut ck = Checkpoint::new(config);
        ck.push_params("", self);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if ck.config.get("kind").and_then(|k| k.as_str()) != Some("predictor") {
            return Err(bad("not a predictor checkpoint".into()));
        }
        let vocab: VocabLayout =
            serde_json::from_value(ck.config["vocab"].clone()).map_err(|e| bad(format!("vocab: {e}")))?;
        let config: PredictorConfig = serde_json::from_value(ck.config["predictor"].clone())
            .map_err(|e| bad(format!("predictor config: {e}")))?;
        let mut model = Self::new(config, vocab)?;
        ck.load_params("", &mut model).map_err(|e| bad(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

fn gather_rows<T: Scalar>(t: &Tensor<T>, rows: impl Iterator<Item = usize>) -> Vec<T> {
    let mut out = Vec::new();
    for r in rows {
        out.extend_from_slice(t.row(r));
    }
    out
}

impl<T: Scalar> Parameters<T> for MaskPredictor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.token_emb.visit(&join(prefix, "token_emb"), f);
        self.pos_emb.visit(&join(prefix, "pos_emb"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit(&join(prefix, "ln_final"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.token_emb.visit_mut(&join(prefix, "token_emb"), f);
        self.pos_emb.visit_mut(&join(prefix, "pos_emb"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit_mut(&join(prefix, "ln_final"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Weighted cross entropy of query logits against target codes; the
/// gradient is written into a fresh tensor.
pub fn weighted_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    weights: &[f64],
) -> (f64, Tensor<T>) {
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        let l = softmax_cross_entropy(logits.row(i), t, T::of(w), grad.row_mut(i));
        loss += w * l.as_f64();
    }
    (loss, grad)
}

fn tiny_predictor(seed: u64, pattern: AttentionPattern) -> Result<MaskPredictor<f64>> {
    let cfg = PredictorConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        pattern,
        dropout: 0.0,
        max_items: 2,
        seed,
    };
    let mut model = MaskPredictor::<f64>::new(cfg, VocabLayout::new(2, 3)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // unit-scale embeddings keep the first layer norm well conditioned
    model.token_emb = Embedding::new(model.token_emb.count(), 8, 1.0, &mut rng);
    model.pos_emb = Embedding::new(model.pos_emb.count(), 8, 1.0, &mut rng);
    let mut flat = model.flat_values();
    for v in flat.iter_mut() {
        *v += rng.gen_range(-0.1..0.1);
    }
    model.load_flat(&flat)?;
    Ok(model)
}

fn predictor_loss_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = AttentionPattern::ALL[(seed % 4) as usize];
    let model = tiny_predictor(seed, pattern)?;
    let layout = model.layout;
    let vocab = layout.vocab;
    let mut seqs = Vec::new();
    for n_hist in [2usize, 1] {
        let hist: Vec<SemanticId> = (0..n_hist).map(|_| vec![rng.gen_range(0..3), rng.gen_range(0..3)]).collect();
        let next = [vocab.mask(), vocab.token(1, rng.gen_range(0..3))];
        seqs.push(assemble_input(&hist, &next, &layout)?);
    }
    let queries: Vec<Query> = vec![(0, 4), (0, 1), (1, 4), (1, 5), (1, 2)];
    let targets: Vec<usize> = (0..queries.len()).map(|_| rng.gen_range(0..3)).collect();
    let weights: Vec<f64> = (0..queries.len()).map(|_| rng.gen_range(0.2..2.0)).collect();
    let inputs = model.flat_values();
    let (m2, s2, q2, t2, w2) = (model.clone(), seqs.clone(), queries.clone(), targets.clone(), weights.clone());
    let op = FnOp::new(
        "predictor_loss",
        move |x| {
            let mut m = model.clone();
            m.load_flat(x)?;
            let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
            let (logits, _) = m.forward(&refs, &queries, None)?;
            Ok(weighted_cross_entropy(&logits, &targets, &weights).0)
        },
        move |x| {
            let mut m = m2.clone();
            m.load_flat(x)?;
            m.zero_grad();
            let refs: Vec<&[usize]> = s2.iter().map(Vec::as_slice).collect();
            let (logits, cache) = m.forward(&refs, &q2, None)?;
            let (_, dl) = weighted_cross_entropy(&logits, &t2, &w2);
            m.backward(&cache, &dl)?;
            Ok(m.flat_grads())
        },
    );
    Ok(GradCase { op: Box::new(op), inputs })
}

fn head_output_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = tiny_predictor(seed, AttentionPattern::Bidirectional)?;
    let vocab = model.vocab();
    let tokens = assemble_input(
        &[vec![rng.gen_range(0..3), rng.gen_range(0..3)]],
        &[vocab.mask(), vocab.mask()],
        &model.layout,
    )?;
    let queries: Vec<Query> = model.layout.next_block().map(|p| (0, p)).collect();
    let proj = random_vec(&mut rng, queries.len() * 3, 1.0);
    let inputs = model.output.flat_values();
    let (m2, t2, q2, p2) = (model.clone(), tokens.clone(), queries.clone(), proj.clone());
    let op = FnOp::new(
        "predictor_head_output",
        move |x| {
            let mut m = model.clone();
            m.output.load_flat(x)?;
            let (logits, _) = m.forward(&[&tokens], &queries, None)?;
            Ok(logits.data().iter().zip(&proj).map(|(a, b)| a * b).sum())
        },
        move |x| {
            let mut m = m2.clone();
            m.output.load_flat(x)?;
            m.zero_grad();
            let (_, cache) = m.forward(&[&t2], &q2, None)?;
            m.backward(&cache, &Tensor::from_vec(&[q2.len(), 3], p2.clone())?)?;
            Ok(m.output.flat_grads())
        },
    );
    Ok(GradCase { op: Box::new(op), inputs })
}

pub fn grad_ops() -> Vec<RegisteredOp> {
    vec![
        RegisteredOp { name: "predictor_loss", make: predictor_loss_case },
        RegisteredOp { name: "predictor_head_output", make: head_output_case },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradient;

    fn model(pattern: AttentionPattern) -> MaskPredictor<f32> {
        let cfg = PredictorConfig {
            layers: 2,
            d_model: 16,
            heads: 4,
            ffn_dim: 32,
            pattern,
            max_items: 3,
            seed: 4,
            ..Default::default()
        };
        MaskPredictor::new(cfg, VocabLayout::new(4, 5).unwrap()).unwrap()
    }

    #[test]
    fn vocab_layout_round_trips_every_code() {
        let v = VocabLayout::new(3, 7).unwrap();
        for h in 0..3 {
            for c in 0..7 {
                let t = v.token(h, c);
                assert_eq!((v.head_of(t), v.code_of(t)), (Some(h), Some(c)));
            }
        }
        assert_eq!((v.mask(), v.pad(), v.size()), (21, 22, 23));
        assert_eq!(v.head_of(v.mask()), None);
        assert_eq!(v.code_of(v.pad()), None);
    }

    #[test]
    fn assemble_layout_arithmetic() {
        let layout = SequenceLayout {
            vocab: VocabLayout::new(2, 4).unwrap(),
            max_items: 3,
        };
        let (mask, pad) = (8, 9);
        let empty = assemble_input(&[], &[mask, mask], &layout).unwrap();
        assert_eq!(empty, vec![pad, pad, pad, pad, pad, pad, mask, mask]);
        let one = assemble_input(&[vec![3, 1]], &[mask, mask], &layout).unwrap();
        assert_eq!(&one[4..6], &[3, 5]);
        assert!(assemble_input(&[vec![4, 0]], &[mask, mask], &layout).is_err());
        assert!(assemble_input(&vec![vec![0, 0]; 4], &[mask, mask], &layout).is_err());
        assert_eq!(layout.next_block(), 6..8);
    }

    #[test]
    fn head_blocks_normalize_and_others_are_empty() {
        let m = model(AttentionPattern::Bidirectional);
        let vocab = m.vocab();
        let tokens = assemble_input(&[vec![1, 2, 3, 4], vec![0, 0, 0, 0]], &[vocab.mask(); 4], &m.layout).unwrap();
        let logits = m.predict(&tokens).unwrap();
        for p in 0..tokens.len() {
            let mut row: Vec<f64> = logits.row(p).iter().map(|&v| v as f64).collect();
            crate::nn::layers::softmax_in_place(&mut row);
            let block = vocab.head_block(m.layout.offset_of(p));
            let inside: f64 = row[block.clone()].iter().sum();
            assert!((inside - 1.0).abs() < 1e-6);
            for (t, &pr) in row.iter().enumerate() {
                if !block.contains(&t) {
                    assert_eq!(pr, 0.0, "position {p} token {t}");
                }
            }
        }
    }

    #[test]
    fn bidirectional_last_token_reaches_first_position() {
        let m = model(AttentionPattern::Bidirectional);
        let vocab = m.vocab();
        let hist = vec![vec![1, 2, 3, 4]; 3];
        let a = assemble_input(&hist, &[vocab.mask(); 4], &m.layout).unwrap();
        let mut b = a.clone();
        *b.last_mut().unwrap() = vocab.token(3, 2);
        assert_ne!(m.predict(&a).unwrap().row(0), m.predict(&b).unwrap().row(0));
    }

    #[test]
    fn padding_never_changes_outputs() {
        let m = model(AttentionPattern::Causal);
        let vocab = m.vocab();
        let a = assemble_input(&[vec![1, 2, 3, 4]], &[vocab.mask(); 4], &m.layout).unwrap();
        let la = m.predict(&a).unwrap();
        let q: Vec<Query> = (8..16).map(|p| (0, p)).collect();
        let (alone, _) = m.forward(&[&a], &q, None).unwrap();
        let other = assemble_input(&[vec![0, 0, 0, 0], vec![2, 2, 2, 2]], &[vocab.mask(); 4], &m.layout).unwrap();
        let (packed, _) = m.forward(&[&other, &a], &q.iter().map(|&(_, p)| (1, p)).collect::<Vec<_>>(), None).unwrap();
        assert_eq!(alone, packed);
        assert_eq!(la.row(8), m.predict(&a).unwrap().row(8));
    }

    #[test]
    fn query_on_padding_is_an_error() {
        let m = model(AttentionPattern::Bidirectional);
        let a = assemble_input(&[], &[m.vocab().mask(); 4], &m.layout).unwrap();
        assert!(m.forward(&[&a], &[(0, 0)], None).is_err());
    }

    #[test]
    fn predictor_grad_ops_pass() {
        for op in grad_ops() {
            for seed in 0..4 {
                let case = (op.make)(seed).unwrap();
                let err = check_gradient(case.op.as_ref(), &case.inputs, 1e-4).unwrap();
                assert!(err < 1e-5, "{} seed {seed}: {err}", op.name);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(AttentionPattern::IntraItemCausal);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        m.save(&p).unwrap();
        let back = MaskPredictor::<f32>::load(&p).unwrap();
        assert_eq!(back.config, m.config);
        let t = assemble_input(&[vec![0, 1, 2, 3]], &[m.vocab().mask(); 4], &m.layout).unwrap();
        assert_eq!(back.predict(&t).unwrap(), m.predict(&t).unwrap());
    }
}
