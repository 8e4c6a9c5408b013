//! Multi-head vector-quantized autoencoder that turns item embeddings into
//! parallel semantic IDs.
//!
//! The encoder output `z` is split into `M` sub-vectors; sub-vector `m` is
//! snapped to its nearest entry of codebook `m`. Training minimizes
//!
//! ```text
//! ‖v − Dec(zq)‖² + Σ_m ‖sg[z_m] − e_m‖² + α ‖z_m − sg[e_m]‖²
//! ```
//!
//! with the straight-through estimator carrying the reconstruction gradient
//! from `zq` back to `z`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ItemEmbeddings;
use crate::error::{Error, Result};
use crate::io::write_jsonl;
use crate::nn::gradcheck::{random_vec, FnOp, GradCase, RegisteredOp};
use crate::nn::layers::{gelu_backward, gelu_forward};
use crate::nn::tensor::join;
use crate::nn::{
    step_model, AdamWConfig, Checkpoint, Linear, OptimizerState, Param, Parameters, Scalar, Tensor,
};

/// Code indices, one per head.
pub type SemanticId = Vec<usize>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Number of heads `M`.
    pub heads: usize,
    /// Codebook size `K`.
    pub codebook_size: usize,
    pub sub_dim: usize,
    /// Hidden widths shared by encoder and decoder (decoder mirrors them).
    pub hidden: Vec<usize>,
    /// Commitment weight α.
    pub alpha: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Reseed unused codes every this many epochs; 0 disables revival.
    pub revive_every: usize,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            codebook_size: 256,
            sub_dim: 32,
            hidden: vec![512],
            alpha: 0.25,
            epochs: 10_000,
            lr: 1e-3,
            batch_size: 2048,
            revive_every: 100,
            seed: 0,
        }
    }
}

impl TokenizerConfig {
    pub fn latent_dim(&self) -> usize {
        self.heads * self.sub_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.heads == 0 || self.codebook_size == 0 || self.sub_dim == 0 {
            return bad("tokenizer heads, codebook_size and sub_dim must be positive".into());
        }
        if !(self.alpha > 0.0) {
            return bad(format!("commitment weight must be positive, got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return bad("tokenizer batch_size must be positive".into());
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }
}

/// Dense layers with GELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

/// Inputs of every layer, kept for the backward pass.
pub struct MlpCache<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h)?;
            inputs.push(h);
            if i + 1 < self.layers.len() {
                h = gelu_forward(&y);
                pre.push(y);
            } else {
                h = y;
            }
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(&mut self, cache: &MlpCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                d = gelu_backward(&cache.pre[i], &d);
            }
            d = self.layers[i].backward(&cache.inputs[i], &d);
        }
        d
    }
}

impl<T: Scalar> Parameters<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Nearest code per head by squared distance; ties go to the lower index.
/// `books` is `[M·K × sub_dim]` with head `m` in rows `m·K..(m+1)·K`.
pub fn quantize<T: Scalar>(z: &[T], books: &Tensor<T>, heads: usize) -> (SemanticId, Vec<T>) {
    let sub = books.cols();
    let k = books.rows() / heads;
    let mut sid = Vec::with_capacity(heads);
    let mut zq = Vec::with_capacity(z.len());
    for m in 0..heads {
        let zm = &z[m * sub..(m + 1) * sub];
        let mut best = 0;
        let mut best_d = T::infinity();
        for c in 0..k {
            let e = books.row(m * k + c);
            let d: T = zm.iter().zip(e).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        sid.push(best);
        zq.extend_from_slice(books.row(m * k + best));
    }
    (sid, zq)
}

fn quantize_rows<T: Scalar>(z: &Tensor<T>, books: &Tensor<T>, heads: usize) -> (Vec<SemanticId>, Tensor<T>) {
    let mut sids = Vec::with_capacity(z.rows());
    let mut zq = Vec::with_capacity(z.len());
    for i in 0..z.rows() {
        let (s, q) = quantize(z.row(i), books, heads);
        sids.push(s);
        zq.extend(q);
    }
    (sids, Tensor::from_vec(&[z.rows(), z.cols()], zq).expect("same shape as z"))
}

#[derive(Debug, Clone)]
pub struct TokenizerModel<T> {
    pub config: TokenizerConfig,
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    /// `[M·K × sub_dim]`
    pub codebooks: Param<T>,
}

/// Per-term weights for the backward pass; the default trains on all three.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl LossTerms {
    pub const ALL: Self = Self {
        recon: 1.0,
        codebook: 1.0,
        commitment: 1.0,
    };
    pub const RECON: Self = Self {
        recon: 1.0,
        codebook: 0.0,
        commitment: 0.0,
    };
    pub const CODEBOOK: Self = Self {
        recon: 0.0,
        codebook: 1.0,
        commitment: 0.0,
    };
    pub const COMMITMENT: Self = Self {
        recon: 0.0,
        codebook: 0.0,
        commitment: 1.0,
    };
}

/// Batch-mean loss values. `vq = codebook + α·commitment`; the two differ
/// only in gradient routing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLoss {
    pub total: f64,
    pub recon: f64,
    pub vq: f64,
}

pub struct VqCache<T> {
    v: Tensor<T>,
    z: Tensor<T>,
    zq: Tensor<T>,
    recon: Tensor<T>,
    sids: Vec<SemanticId>,
    enc: MlpCache<T>,
    dec: MlpCache<T>,
}

impl<T: Scalar> VqCache<T> {
    pub fn sids(&self) -> &[SemanticId] {
        &self.sids
    }

    pub fn latent(&self) -> &Tensor<T> {
        &self.z
    }
}

impl<T: Scalar> TokenizerModel<T> {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, config: TokenizerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        let mut widths = vec![input_dim];
        widths.extend(&config.hidden);
        widths.push(config.latent_dim());
        let encoder = Mlp::new(&widths, rng);
        widths.reverse();
        let decoder = Mlp::new(&widths, rng);
        let codebooks = Param::new(Tensor::randn(
            &[config.heads * config.codebook_size, config.sub_dim],
            1.0,
            rng,
        ));
        Ok(Self {
            config,
            encoder,
            decoder,
            codebooks,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    fn check_input(&self, v: &Tensor<T>) -> Result<()> {
        if v.shape().len() != 2 || v.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "tokenizer expects [n × {}] embeddings, got {:?}",
                self.input_dim(),
                v.shape()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(v)?;
        let z = self.encoder.apply(v)?;
        z.ensure_finite("encoder output")?;
        Ok(z)
    }

    pub fn quantize(&self, z: &Tensor<T>) -> (Vec<SemanticId>, Tensor<T>) {
        quantize_rows(z, &self.codebooks.value, self.config.heads)
    }

    /// Encode, quantize and decode.
    pub fn reconstruct(&self, v: &Tensor<T>) -> Result<(Vec<SemanticId>, Tensor<T>)> {
        let (sids, zq) = self.quantize(&self.encode(v)?);
        Ok((sids, self.decoder.apply(&zq)?))
    }

    pub fn loss_forward(&self, v: &Tensor<T>) -> Result<(VqLoss, VqCache<T>)> {
        self.check_input(v)?;
        let n = v.rows().max(1) as f64;
        let (z, enc) = self.encoder.forward(v)?;
        z.ensure_finite("encoder output")?;
        let (sids, zq) = self.quantize(&z);
        let (recon, dec) = self.decoder.forward(&zq)?;
        let sq = |a: &[T], b: &[T]| -> f64 { a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum() };
        let recon_loss = sq(v.data(), recon.data()) / n;
        let dist = sq(z.data(), zq.data()) / n;
        let vq = (1.0 + self.config.alpha) * dist;
        let loss = VqLoss {
            total: recon_loss + vq,
            recon: recon_loss,
            vq,
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("tokenizer loss".into()));
        }
        Ok((
            loss,
            VqCache {
                v: v.clone(),
                z,
                zq,
                recon,
                sids,
                enc,
                dec,
            },
        ))
    }

    /// Accumulates the gradients of the weighted loss terms.
    pub fn loss_backward(&mut self, cache: &VqCache<T>, terms: LossTerms) {
        let n = T::of(cache.v.rows().max(1) as f64);
        let two = T::of(2.0);
        let (heads, k, sub) = (self.config.heads, self.config.codebook_size, self.config.sub_dim);
        let mut dz = Tensor::zeros(cache.z.shape());
        if terms.recon != 0.0 {
            let w = T::of(terms.recon);
            let mut dout = cache.recon.clone();
            for (d, &x) in dout.data_mut().iter_mut().zip(cache.v.data()) {
                *d = w * two * (*d - x) / n;
            }
            let dzq = self.decoder.backward(&cache.dec, &dout);
            dz.add_assign(&dzq).expect("latent shape");
        }
        if terms.commitment != 0.0 {
            let w = T::of(terms.commitment * self.config.alpha);
            for ((d, &a), &b) in dz.data_mut().iter_mut().zip(cache.z.data()).zip(cache.zq.data()) {
                *d += w * two * (a - b) / n;
            }
        }
        if terms.codebook != 0.0 {
            let w = T::of(terms.codebook);
            let grad = &mut self.codebooks.grad;
            for (i, sid) in cache.sids.iter().enumerate() {
                let (zr, qr) = (cache.z.row(i), cache.zq.row(i));
                for (m, &c) in sid.iter().enumerate() {
                    let g = grad.row_mut(m * k + c);
                    for j in 0..sub {
                        g[j] += w * two * (qr[m * sub + j] - zr[m * sub + j]) / n;
                    }
                }
            }
        }
        if terms.recon != 0.0 || terms.commitment != 0.0 {
            self.encoder.backward(&cache.enc, &dz);
        }
        debug_assert_eq!(cache.zq.cols(), heads * sub);
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::json!({
            "kind": "tokenizer",
            "input_dim": self.input_dim(),
            "tokenizer": self.config,
        });
        let mut ck = Checkpoint::new(config);
        ck.push_params("", self);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if ck.config.get("kind").and_then(|k| k.as_str()) != Some("tokenizer") {
            return Err(bad("not a tokenizer checkpoint".into()));
        }
        let input_dim = ck.config["input_dim"]
            .as_u64()
            .ok_or_else(|| bad("manifest lacks input_dim".into()))? as usize;
        let config: TokenizerConfig = serde_json::from_value(ck.config["tokenizer"].clone())
            .map_err(|e| bad(format!("tokenizer config: {e}")))?;
        let mut model = Self::new(input_dim, config, &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.load_params("", &mut model).map_err(|e| bad(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

impl<T: Scalar> Parameters<T> for TokenizerModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        f(&join(prefix, "codebooks"), &self.codebooks);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        f(&join(prefix, "codebooks"), &mut self.codebooks);
    }
}

/// Lloyd's k-means on the rows of `points` (`[n × dim]`), seeded from
/// distinct data points. Returns `None` when there are fewer than `k`
/// distinct points.
fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<f64>>> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(rng);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &i in &order {
        if centers.len() == k {
            break;
        }
        if !centers.iter().any(|c| c == &points[i]) {
            centers.push(points[i].clone());
        }
    }
    if centers.len() < k {
        return None;
    }
    let dim = points[0].len();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let c = nearest(p, &centers);
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Some(centers)
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, e) in centers.iter().enumerate() {
        let d: f64 = p.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn head_points<T: Scalar>(z: &Tensor<T>, m: usize, sub: usize) -> Vec<Vec<f64>> {
    (0..z.rows())
        .map(|i| z.row(i)[m * sub..(m + 1) * sub].iter().map(|x| x.as_f64()).collect())
        .collect()
}

fn init_codebooks<T: Scalar>(model: &mut TokenizerModel<T>, z: &Tensor<T>, rng: &mut ChaCha8Rng) {
    let (heads, k, sub) = (model.config.heads, model.config.codebook_size, model.config.sub_dim);
    for m in 0..heads {
        let pts = head_points(z, m, sub);
        let centers = kmeans(&pts, k, 20, rng).unwrap_or_else(|| {
            log::warn!("head {m}: fewer than {k} distinct encoder outputs, random codebook init");
            (0..k)
                .map(|_| (0..sub).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
                .collect()
        });
        for (c, center) in centers.iter().enumerate() {
            for (dst, &v) in model.codebooks.value.row_mut(m * k + c).iter_mut().zip(center) {
                *dst = T::of(v);
            }
        }
    }
}

fn embedding_tensor<T: Scalar>(emb: &ItemEmbeddings, rows: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows.len() * emb.dim());
    for &i in rows {
        data.extend(emb.vector(i).iter().map(|&x| T::of(x as f64)));
    }
    Tensor::from_vec(&[rows.len(), emb.dim()], data).expect("rows × dim")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub vq: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TokenizerReport {
    pub loss_curve: Vec<EpochLoss>,
    /// Mean squared reconstruction error per coordinate over the catalog.
    pub recon_mse: f64,
    /// Mean per-coordinate variance of the input embeddings.
    pub data_variance: f64,
    /// Distinct codes used per head over the catalog.
    pub codes_used: Vec<usize>,
    pub collision_rate: f64,
}

pub struct TrainedTokenizer {
    pub model: TokenizerModel<f32>,
    pub catalog: SidCatalog,
    pub report: TokenizerReport,
}

/// Trains the tokenizer and tokenizes the whole catalog.
pub fn train_tokenizer(emb: &ItemEmbeddings, config: &TokenizerConfig) -> Result<TrainedTokenizer> {
    config.validate()?;
    if emb.is_empty() {
        return Err(Error::Invalid("empty embedding catalog".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = TokenizerModel::<f32>::new(emb.dim(), config.clone(), &mut rng)?;
    let all: Vec<usize> = (0..emb.len()).collect();
    let full = embedding_tensor::<f32>(emb, &all);
    let z0 = model.encode(&full)?;
    init_codebooks(&mut model, &z0, &mut rng);

    let mut opt = OptimizerState::new(AdamWConfig {
        lr: config.lr,
        ..AdamWConfig::default()
    });
    let (heads, k) = (config.heads, config.codebook_size);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut order = all.clone();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut used = vec![false; heads * k];
        let (mut tot, mut rec, mut vq) = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let v = embedding_tensor::<f32>(emb, batch);
            model.zero_grad();
            let (loss, cache) = model.loss_forward(&v)?;
            model.loss_backward(&cache, LossTerms::ALL);
            step_model(&mut model, &mut opt)?;
            for sid in cache.sids() {
                for (m, &c) in sid.iter().enumerate() {
                    used[m * k + c] = true;
                }
            }
            let w = batch.len() as f64 / emb.len() as f64;
            tot += w * loss.total;
            rec += w * loss.recon;
            vq += w * loss.vq;
        }
        curve.push(EpochLoss {
            epoch,
            total: tot,
            recon: rec,
            vq,
        });
        let revive = config.revive_every > 0 && (epoch + 1) % config.revive_every == 0 && epoch + 1 < config.epochs;
        if revive && used.iter().any(|u| !u) {
            let z = model.encode(&full)?;
            let sub = config.sub_dim;
            for (slot, _) in used.iter().enumerate().filter(|(_, u)| !**u) {
                let m = slot / k;
                let src = rng.gen_range(0..z.rows());
                model.codebooks.value.row_mut(slot).copy_from_slice(&z.row(src)[m * sub..(m + 1) * sub]);
            }
        }
    }

    let catalog = tokenize_catalog(emb, &model)?;
    let (_, recon) = model.reconstruct(&full)?;
    let d = emb.dim();
    let total = (emb.len() * d) as f64;
    let recon_mse = recon
        .data()
        .iter()
        .zip(emb.values())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / total;
    let mut data_variance = 0.0;
    for j in 0..d {
        let col: Vec<f64> = (0..emb.len()).map(|i| emb.vector(i)[j] as f64).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        data_variance += col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
    }
    data_variance /= d as f64;
    let codes_used = catalog.codes_used(k);
    for (m, &n) in codes_used.iter().enumerate() {
        if n < 2 {
            log::warn!("tokenizer head {m} collapsed to {n} distinct code(s)");
        }
    }
    let report = TokenizerReport {
        loss_curve: curve,
        recon_mse,
        data_variance,
        codes_used,
        collision_rate: catalog.collision_rate(),
    };
    Ok(TrainedTokenizer {
        model,
        catalog,
        report,
    })
}

/// Semantic IDs of every catalog item, sharded across threads.
pub fn tokenize_catalog<T: Scalar>(emb: &ItemEmbeddings, model: &TokenizerModel<T>) -> Result<SidCatalog> {
    let all: Vec<usize> = (0..emb.len()).collect();
    let chunks: Vec<Vec<SemanticId>> = all
        .par_chunks(256)
        .map(|rows| -> Result<Vec<SemanticId>> {
            let z = model.encode(&embedding_tensor::<T>(emb, rows))?;
            Ok(model.quantize(&z).0)
        })
        .collect::<Result<_>>()?;
    SidCatalog::new(
        model.config.heads,
        emb.ids().iter().cloned().zip(chunks.into_iter().flatten()).collect(),
    )
}

/// Item ↔ semantic ID maps. Collisions are kept: the reverse map lists every
/// item sharing a SID in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct SidCatalog {
    heads: usize,
    items: Vec<(String, SemanticId)>,
    forward: HashMap<String, usize>,
    reverse: BTreeMap<SemanticId, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct SidRecord {
    item_id: String,
    sid: SemanticId,
}

impl SidCatalog {
    pub fn new(heads: usize, items: Vec<(String, SemanticId)>) -> Result<Self> {
        let mut forward = HashMap::with_capacity(items.len());
        let mut reverse: BTreeMap<SemanticId, Vec<String>> = BTreeMap::new();
        for (i, (id, sid)) in items.iter().enumerate() {
            if sid.len() != heads {
                return Err(Error::Invalid(format!(
                    "item {id:?} has a {}-code SID, expected {heads}",
                    sid.len()
                )));
            }
            if forward.insert(id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("item {id:?} listed twice")));
            }
            reverse.entry(sid.clone()).or_default().push(id.clone());
        }
        for ids in reverse.values_mut() {
            ids.sort();
        }
        Ok(Self {
            heads,
            items,
            forward,
            reverse,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn entries(&self) -> &[(String, SemanticId)] {
        &self.items
    }

    pub fn sid(&self, item: &str) -> Option<&SemanticId> {
        self.forward.get(item).map(|&i| &self.items[i].1)
    }

    /// Items sharing `sid`, ascending; empty when no item has it.
    pub fn items_for(&self, sid: &[usize]) -> &[String] {
        self.reverse.get(sid).map_or(&[], |v| v.as_slice())
    }

    pub fn distinct_sids(&self) -> usize {
        self.reverse.len()
    }

    /// Share of items that do not own a distinct SID: `1 − distinct / items`.
    pub fn collision_rate(&self) -> f64 {
        if self.items.is_empty() {
            0.0
        } else {
            1.0 - self.reverse.len() as f64 / self.items.len() as f64
        }
    }

    pub fn codes_used(&self, codebook_size: usize) -> Vec<usize> {
        let mut used = vec![vec![false; codebook_size]; self.heads];
        for (_, sid) in &self.items {
            for (m, &c) in sid.iter().enumerate() {
                if c < codebook_size {
                    used[m][c] = true;
                }
            }
        }
        used.iter().map(|u| u.iter().filter(|&&x| x).count()).collect()
    }

    /// Every item must have a SID.
    pub fn ensure_covers<'a>(&self, items: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for it in items {
            if !self.forward.contains_key(it) {
                return Err(Error::MissingItem(it.to_string()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(
            path,
            self.items.iter().map(|(item_id, sid)| SidRecord {
                item_id: item_id.clone(),
                sid: sid.clone(),
            }),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut items = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: SidRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            items.push((r.item_id, r.sid));
        }
        let heads = items.first().map(|(_, s)| s.len()).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "empty SID catalog".into(),
        })?;
        Self::new(heads, items)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn small_config() -> TokenizerConfig {
    TokenizerConfig {
        heads: 2,
        codebook_size: 4,
        sub_dim: 3,
        hidden: vec![7],
        ..TokenizerConfig::default()
    }
}

fn mlp_input_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, widths) = (3, [5, 9, 6, 4]);
    let mlp = Mlp::<f64>::new(&widths, &mut rng);
    let proj = random_vec(&mut rng, n * 4, 1.0);
    let inputs = random_vec(&mut rng, n * 5, 1.5);
    let (m2, p2) = (mlp.clone(), proj.clone());
    let op = FnOp::new(
        "mlp_input",
        move |x| Ok(dot(mlp.apply(&Tensor::from_vec(&[n, 5], x.to_vec())?)?.data(), &proj)),
        move |x| {
            let mut m = m2.clone();
            let (_, cache) = m.forward(&Tensor::from_vec(&[n, 5], x.to_vec())?)?;
            Ok(m.backward(&cache, &Tensor::from_vec(&[n, 4], p2.clone())?).into_data())
        },
    );
    Ok(GradCase { op: Box::new(op), inputs })
}

/// Builds a tokenizer instance plus a batch; the codes are frozen at the
/// base point so each case is a smooth function of its inputs.
fn vq_fixture(seed: u64) -> Result<(TokenizerModel<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = TokenizerModel::<f64>::new(5, small_config(), &mut rng)?;
    let v = Tensor::randn(&[4, 5], 1.0, &mut rng);
    Ok((model, v))
}

fn frozen_terms(
    model: &TokenizerModel<f64>,
    v: &Tensor<f64>,
    sids: &[SemanticId],
    terms: LossTerms,
) -> Result<f64> {
    let n = v.rows() as f64;
    let z = model.encoder.apply(v)?;
    let k = model.config.codebook_size;
    let mut zq = Vec::with_capacity(z.len());
    for sid in sids {
        for (m, &c) in sid.iter().enumerate() {
            zq.extend_from_slice(model.codebooks.value.row(m * k + c));
        }
    }
    let zq = Tensor::from_vec(z.shape(), zq)?;
    let dist: f64 = z.data().iter().zip(zq.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let recon = model.decoder.apply(&zq)?;
    let rec: f64 = recon.data().iter().zip(v.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    Ok(terms.recon * rec + (terms.codebook + model.config.alpha * terms.commitment) * dist)
}

/// Gradient of one loss term with respect to one parameter group.
fn vq_case(seed: u64, name: &'static str, terms: LossTerms, group: &'static str) -> Result<GradCase> {
    let (model, v) = vq_fixture(seed)?;
    let sids = model.loss_forward(&v)?.1.sids;
    let inputs = group_values(&model, group);
    let (m2, v2, s2) = (model.clone(), v.clone(), sids.clone());
    let op = FnOp::new(
        name,
        move |x| {
            let mut m = model.clone();
            set_group(&mut m, group, x)?;
            frozen_terms(&m, &v, &sids, terms)
        },
        move |x| {
            let mut m = m2.clone();
            set_group(&mut m, group, x)?;
            m.zero_grad();
            let (_, mut cache) = m.loss_forward(&v2)?;
            if cache.sids != s2 {
                return Err(Error::Invalid("code assignment moved".into()));
            }
            cache.sids = s2.clone();
            m.loss_backward(&cache, terms);
            Ok(group_grads(&m, group))
        },
    );
    Ok(GradCase { op: Box::new(op), inputs })
}

fn group_values(m: &TokenizerModel<f64>, group: &str) -> Vec<f64> {
    match group {
        "encoder" => m.encoder.flat_values(),
        "decoder" => m.decoder.flat_values(),
        _ => m.codebooks.value.data().to_vec(),
    }
}

fn group_grads(m: &TokenizerModel<f64>, group: &str) -> Vec<f64> {
    match group {
        "encoder" => m.encoder.flat_grads(),
        "decoder" => m.decoder.flat_grads(),
        _ => m.codebooks.grad.data().to_vec(),
    }
}

fn set_group(m: &mut TokenizerModel<f64>, group: &str, x: &[f64]) -> Result<()> {
    match group {
        "encoder" => m.encoder.load_flat(x),
        "decoder" => m.decoder.load_flat(x),
        _ => {
            m.codebooks.value.data_mut().copy_from_slice(x);
            Ok(())
        }
    }
}

fn codebook_term_case(seed: u64) -> Result<GradCase> {
    vq_case(seed, "vq_codebook_term", LossTerms::CODEBOOK, "codebooks")
}

fn commitment_term_case(seed: u64) -> Result<GradCase> {
    vq_case(seed, "vq_commitment_term", LossTerms::COMMITMENT, "encoder")
}

fn decoder_recon_case(seed: u64) -> Result<GradCase> {
    vq_case(seed, "vq_decoder_recon", LossTerms::RECON, "decoder")
}

pub fn grad_ops() -> Vec<RegisteredOp> {
    vec![
        RegisteredOp { name: "mlp_input", make: mlp_input_case },
        RegisteredOp { name: "vq_codebook_term", make: codebook_term_case },
        RegisteredOp { name: "vq_commitment_term", make: commitment_term_case },
        RegisteredOp { name: "vq_decoder_recon", make: decoder_recon_case },
    ]
}
