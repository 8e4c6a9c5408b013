//! Multi-head self-attention over packed variable-length sequences, and the
//! pre-norm transformer block built on it.
//!
//! A packed batch stacks the rows of several sequences into one
//! `[rows × d_model]` matrix. Row-wise layers run on the whole stack; the
//! attention step runs per [`Segment`], each with its own [`AttentionMask`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{dropout_mask, gelu_backward, gelu_forward, LayerNorm, LayerNormCache, Linear};
use super::scalar::{gemm, MatRef, Scalar, NEG_LARGE};
use super::tensor::{join, Param, Parameters, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionPattern {
    #[default]
    Bidirectional,
    Causal,
    /// Causal across items, bidirectional within an item.
    InterItemCausal,
    /// Causal within an item, bidirectional across items.
    IntraItemCausal,
}

impl AttentionPattern {
    pub const ALL: [AttentionPattern; 4] = [
        AttentionPattern::Bidirectional,
        AttentionPattern::Causal,
        AttentionPattern::InterItemCausal,
        AttentionPattern::IntraItemCausal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionPattern::Bidirectional => "bidirectional",
            AttentionPattern::Causal => "causal",
            AttentionPattern::InterItemCausal => "inter-item-causal",
            AttentionPattern::IntraItemCausal => "intra-item-causal",
        }
    }

    fn allows(self, i: usize, j: usize, item_i: usize, item_j: usize) -> bool {
        match self {
            AttentionPattern::Bidirectional => true,
            AttentionPattern::Causal => j <= i,
            AttentionPattern::InterItemCausal => item_j <= item_i,
            AttentionPattern::IntraItemCausal => item_j != item_i || j <= i,
        }
    }
}

/// Boolean `[L × L]` matrix; `allow(i, j)` means row `i` may attend to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pattern: AttentionPattern,
    len: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    /// `item_of[p]` is the item slot of position `p`; padding columns are
    /// never allowed.
    pub fn build(pattern: AttentionPattern, item_of: &[usize], is_pad: &[bool]) -> Result<Self> {
        let len = item_of.len();
        if is_pad.len() != len {
            return Err(Error::Shape(format!(
                "{} padding flags for {len} positions",
                is_pad.len()
            )));
        }
        let mut allow = vec![false; len * len];
        for i in 0..len {
            for j in 0..len {
                allow[i * len + j] = !is_pad[j] && pattern.allows(i, j, item_of[i], item_of[j]);
            }
        }
        Ok(Self {
            pattern,
            len,
            allow,
        })
    }

    pub fn from_matrix(len: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != len * len {
            return Err(Error::Shape(format!("mask of {} for {len}×{len}", allow.len())));
        }
        Ok(Self {
            pattern: AttentionPattern::Bidirectional,
            len,
            allow,
        })
    }

    pub fn pattern(&self) -> AttentionPattern {
        self.pattern
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allow(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.len + j]
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.len {
            if !(0..self.len).any(|j| self.allow(i, j)) {
                return Err(Error::EmptyAttentionRow { row: i });
            }
        }
        Ok(())
    }
}

/// Rows `start..start + mask.len()` of a packed batch.
#[derive(Debug, Clone)]
pub struct Segment {
    pub start: usize,
    pub mask: AttentionMask,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

fn check_segments(segments: &[Segment], rows: usize) -> Result<()> {
    let mut next = 0;
    for s in segments {
        if s.start != next {
            return Err(Error::Shape(format!(
                "segment starts at {} but previous ended at {next}",
                s.start
            )));
        }
        if s.is_empty() {
            return Err(Error::Shape("empty segment".into()));
        }
        s.mask.validate()?;
        next += s.len();
    }
    if next != rows {
        return Err(Error::Shape(format!("segments cover {next} of {rows} rows")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T> {
    pub heads: usize,
    /// Fused query/key/value projection `[d × 3d]`, bias-free: a key bias
    /// only shifts each score row and never receives gradient.
    pub qkv: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    input: Tensor<T>,
    qkv: Tensor<T>,
    /// Per segment, per head, row-major `[len × len]` attention weights.
    probs: Vec<Vec<Vec<T>>>,
    context: Tensor<T>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new<R: Rng + ?Sized>(d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            qkv: Linear::without_bias(d_model, 3 * d_model, rng),
            out: Linear::new(d_model, d_model, rng),
        })
    }

    fn d_model(&self) -> usize {
        self.out.input_dim()
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        segments: &[Segment],
    ) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let d = self.d_model();
        let dh = d / self.heads;
        let n = x.rows();
        check_segments(segments, n)?;
        let qkv = self.qkv.forward(x)?;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let neg = T::of(NEG_LARGE);
        let mut context = Tensor::zeros(&[n, d]);
        let mut probs = Vec::with_capacity(segments.len());
        let q_all = qkv.data();
        for seg in segments {
            let len = seg.len();
            let mut seg_probs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = &q_all[seg.start * 3 * d + h * dh..];
                let k = &q_all[seg.start * 3 * d + d + h * dh..];
                let v = &q_all[seg.start * 3 * d + 2 * d + h * dh..];
                let mut s = vec![T::zero(); len * len];
                gemm(
                    scale,
                    MatRef::new(q, len, dh).with_ld(3 * d),
                    MatRef::t(k, len, dh).with_ld(3 * d),
                    T::zero(),
                    &mut s,
                    len,
                );
                for i in 0..len {
                    let row = &mut s[i * len..(i + 1) * len];
                    for (j, val) in row.iter_mut().enumerate() {
                        if !seg.mask.allow(i, j) {
                            *val = neg;
                        }
                    }
                    super::layers::softmax_in_place(row);
                }
                let ctx = &mut context.data_mut()[seg.start * d + h * dh..];
                gemm(
                    T::one(),
                    MatRef::new(&s, len, len),
                    MatRef::new(v, len, dh).with_ld(3 * d),
                    T::zero(),
                    ctx,
                    d,
                );
                seg_probs.push(s);
            }
            probs.push(seg_probs);
        }
        let y = self.out.forward(&context)?;
        Ok((
            y,
            AttentionCache {
                input: x.clone(),
                qkv,
                probs,
                context,
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &AttentionCache<T>,
        segments: &[Segment],
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let d = self.d_model();
        let dh = d / self.heads;
        let n = dy.rows();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let dctx = self.out.backward(&cache.context, dy);
        let mut dqkv = Tensor::zeros(&[n, 3 * d]);
        let qkv = cache.qkv.data();
        for (si, seg) in segments.iter().enumerate() {
            let len = seg.len();
            for h in 0..self.heads {
                let p = &cache.probs[si][h];
                let q = &qkv[seg.start * 3 * d + h * dh..];
                let k = &qkv[seg.start * 3 * d + d + h * dh..];
                let v = &qkv[seg.start * 3 * d + 2 * d + h * dh..];
                let dc = &dctx.data()[seg.start * d + h * dh..];
                // dP = dC V^T
                let mut dp = vec![T::zero(); len * len];
                gemm(
                    T::one(),
                    MatRef::new(dc, len, dh).with_ld(d),
                    MatRef::t(v, len, dh).with_ld(3 * d),
                    T::zero(),
                    &mut dp,
                    len,
                );
                // dV = P^T dC
                gemm(
                    T::one(),
                    MatRef::t(p, len, len),
                    MatRef::new(dc, len, dh).with_ld(d),
                    T::zero(),
                    &mut dqkv.data_mut()[seg.start * 3 * d + 2 * d + h * dh..],
                    3 * d,
                );
                // dS = P * (dP - rowsum(dP * P))
                for i in 0..len {
                    let pr = &p[i * len..(i + 1) * len];
                    let dr = &mut dp[i * len..(i + 1) * len];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                    for (dv, pv) in dr.iter_mut().zip(pr) {
                        *dv = *pv * (*dv - dot);
                    }
                }
                let ds = dp;
                // dQ = scale dS K ; dK = scale dS^T Q
                gemm(
                    scale,
                    MatRef::new(&ds, len, len),
                    MatRef::new(k, len, dh).with_ld(3 * d),
                    T::zero(),
                    &mut dqkv.data_mut()[seg.start * 3 * d + h * dh..],
                    3 * d,
                );
                gemm(
                    scale,
                    MatRef::t(&ds, len, len),
                    MatRef::new(q, len, dh).with_ld(3 * d),
                    T::zero(),
                    &mut dqkv.data_mut()[seg.start * 3 * d + d + h * dh..],
                    3 * d,
                );
            }
        }
        self.qkv.backward(&cache.input, &dqkv)
    }
}

impl<T: Scalar> Parameters<T> for MultiHeadAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Pre-norm block: `x + Attn(LN(x))` followed by `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock<T> {
    pub ln_attn: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    ln_attn: LayerNormCache<T>,
    attn: AttentionCache<T>,
    attn_drop: Option<Vec<T>>,
    ln_ffn_cache: LayerNormCache<T>,
    ln_ffn_out: Tensor<T>,
    hidden_pre: Tensor<T>,
    hidden: Tensor<T>,
    ffn_drop: Option<Vec<T>>,
}

fn apply_mask<T: Scalar>(t: &mut Tensor<T>, mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, k) in t.data_mut().iter_mut().zip(m) {
            *v *= *k;
        }
    }
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(d_model),
            attn: MultiHeadAttention::new(d_model, heads, rng)?,
            ln_ffn: LayerNorm::new(d_model),
            ffn_in: Linear::new(d_model, ffn_dim, rng),
            ffn_out: Linear::new(ffn_dim, d_model, rng),
            dropout,
        })
    }

    /// `rng` enables dropout (training); `None` is deterministic inference.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        segments: &[Segment],
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (h, ln_attn) = self.ln_attn.forward(x)?;
        let (mut a, attn) = self.attn.forward(&h, segments)?;
        let attn_drop = match rng.as_deref_mut() {
            Some(r) => dropout_mask(a.len(), self.dropout, r),
            None => None,
        };
        apply_mask(&mut a, &attn_drop);
        let mut x1 = x.clone();
        x1.add_assign(&a)?;
        let (ln_ffn_out, ln_ffn_cache) = self.ln_ffn.forward(&x1)?;
        let hidden_pre = self.ffn_in.forward(&ln_ffn_out)?;
        let hidden = gelu_forward(&hidden_pre);
        let mut f = self.ffn_out.forward(&hidden)?;
        let ffn_drop = match rng {
            Some(r) => dropout_mask(f.len(), self.dropout, r),
            None => None,
        };
        apply_mask(&mut f, &ffn_drop);
        x1.add_assign(&f)?;
        Ok((
            x1,
            BlockCache {
                ln_attn,
                attn,
                attn_drop,
                ln_ffn_cache,
                ln_ffn_out,
                hidden_pre,
                hidden,
                ffn_drop,
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &BlockCache<T>,
        segments: &[Segment],
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut df = dy.clone();
        apply_mask(&mut df, &cache.ffn_drop);
        let dhidden = self.ffn_out.backward(&cache.hidden, &df);
        let dpre = gelu_backward(&cache.hidden_pre, &dhidden);
        let dln = self.ffn_in.backward(&cache.ln_ffn_out, &dpre);
        let mut dx1 = self.ln_ffn.backward(&cache.ln_ffn_cache, &dln);
        dx1.add_assign(dy)?;

        let mut da = dx1.clone();
        apply_mask(&mut da, &cache.attn_drop);
        let dh = self.attn.backward(&cache.attn, segments, &da);
        let mut dx = self.ln_attn.backward(&cache.ln_attn, &dh);
        dx.add_assign(&dx1)?;
        Ok(dx)
    }
}

impl<T: Scalar> Parameters<T> for TransformerBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.ln_attn.visit(&join(prefix, "ln_attn"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln_ffn.visit(&join(prefix, "ln_ffn"), f);
        self.ffn_in.visit(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit(&join(prefix, "ffn_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.ln_attn.visit_mut(&join(prefix, "ln_attn"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln_ffn.visit_mut(&join(prefix, "ln_ffn"), f);
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), f);
    }
}

/// One block over a single sequence `x: [L × d_model]`.
pub fn forward_attention_block<T: Scalar>(
    x: &Tensor<T>,
    mask: &AttentionMask,
    block: &TransformerBlock<T>,
) -> Result<Tensor<T>> {
    if mask.len() != x.rows() {
        return Err(Error::Shape(format!(
            "mask is {}×{} for {} rows",
            mask.len(),
            mask.len(),
            x.rows()
        )));
    }
    let seg = [Segment {
        start: 0,
        mask: mask.clone(),
    }];
    Ok(block.forward(x, &seg, None)?.0)
}
