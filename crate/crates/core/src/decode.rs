//! Generation of the next item's token block by iterative unmasking.
//!
//! Every hypothesis starts as `M` masked positions. Each of the `T` steps
//! picks `M/T` positions to commit, either by confidence (adaptive) or by a
//! fixed left-to-right / right-to-left schedule, and commits them one at a
//! time with beam expansion and pruning. Positions not yet committed stay
//! masked for the next step.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::predictor::{assemble_input, MaskPredictor, Query, VocabLayout};
use crate::tokenizer::SemanticId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Adaptive,
    #[serde(rename = "left2right")]
    LeftToRight,
    #[serde(rename = "right2left")]
    RightToLeft,
}

impl Order {
    pub const ALL: [Order; 3] = [Order::Adaptive, Order::LeftToRight, Order::RightToLeft];

    pub fn name(self) -> &'static str {
        match self {
            Order::Adaptive => "adaptive",
            Order::LeftToRight => "left2right",
            Order::RightToLeft => "right2left",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Beam,
    /// A single hypothesis regardless of the beam width.
    Greedy,
}

/// When the predictor is re-run inside a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rerun {
    /// After every committed position.
    PerPosition,
    /// Once at the start of every step.
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Number of steps `T`; must divide the head count.
    #[serde(rename = "T")]
    pub steps: usize,
    /// Beam width `B`.
    #[serde(rename = "B")]
    pub beam: usize,
    pub k: usize,
    pub order: Order,
    pub mode: Mode,
    pub rerun: Rerun,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            beam: 20,
            k: 10,
            order: Order::Adaptive,
            mode: Mode::Beam,
            rerun: Rerun::PerPosition,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, heads: usize) -> Result<()> {
        if self.steps == 0 || self.steps > heads || heads % self.steps != 0 {
            return Err(Error::Invalid(format!(
                "decode.T = {} must be a divisor of the head count {heads}",
                self.steps
            )));
        }
        if self.beam == 0 {
            return Err(Error::Invalid("decode.B must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Invalid("decode.k must be positive".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        match self.mode {
            Mode::Beam => self.beam,
            Mode::Greedy => 1,
        }
    }
}

/// A partial hypothesis for the next item's block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    /// Vocabulary tokens, `[MASK]` where unfilled.
    pub tokens: Vec<usize>,
    /// Filled positions in commit order.
    pub filled: Vec<usize>,
    pub logprob: f64,
}

impl DecodeState {
    pub fn empty(vocab: &VocabLayout) -> Self {
        Self {
            tokens: vec![vocab.mask(); vocab.heads],
            filled: Vec::new(),
            logprob: 0.0,
        }
    }

    pub fn is_filled(&self, pos: usize, vocab: &VocabLayout) -> bool {
        self.tokens[pos] != vocab.mask()
    }

    pub fn is_complete(&self, vocab: &VocabLayout) -> bool {
        self.tokens.iter().all(|&t| t != vocab.mask())
    }

    /// Codes of a complete block.
    pub fn sid(&self, vocab: &VocabLayout) -> Option<SemanticId> {
        self.tokens.iter().map(|&t| vocab.code_of(t)).collect()
    }
}

/// Per-position log-probabilities over the owning head's codes; entries of
/// filled positions may be empty.
pub type BlockLogProbs = Vec<Vec<f64>>;

/// Source of next-block distributions given a history.
pub trait BlockScorer {
    fn vocab(&self) -> VocabLayout;

    /// Log-probabilities for the masked positions of each block.
    fn score(&self, history: &[SemanticId], blocks: &[&[usize]]) -> Result<Vec<BlockLogProbs>>;
}

impl<T: Scalar> BlockScorer for MaskPredictor<T> {
    fn vocab(&self) -> VocabLayout {
        self.layout.vocab
    }

    fn score(&self, history: &[SemanticId], blocks: &[&[usize]]) -> Result<Vec<BlockLogProbs>> {
        let layout = self.layout;
        let vocab = layout.vocab;
        let history = &history[history.len().saturating_sub(layout.max_items)..];
        let seqs = blocks
            .iter()
            .map(|b| assemble_input(history, b, &layout))
            .collect::<Result<Vec<_>>>()?;
        let next = layout.next_block();
        let mut queries: Vec<Query> = Vec::new();
        for (i, b) in blocks.iter().enumerate() {
            queries.extend((0..vocab.heads).filter(|&o| b[o] == vocab.mask()).map(|o| (i, next.start + o)));
        }
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        let rows = self.head_log_probs(&refs, &queries)?;
        let mut out = vec![vec![Vec::new(); vocab.heads]; blocks.len()];
        for (&(i, p), row) in queries.iter().zip(rows) {
            out[i][p - next.start] = row;
        }
        Ok(out)
    }
}

fn max_logprob(row: &[f64]) -> f64 {
    row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// The `count` unfilled positions with the highest maximum probability,
/// ordered by descending confidence, ties toward the lower position.
pub fn select_positions(state: &DecodeState, log_probs: &BlockLogProbs, count: usize, vocab: &VocabLayout) -> Vec<usize> {
    let mut open: Vec<(usize, f64)> = (0..state.tokens.len())
        .filter(|&p| !state.is_filled(p, vocab))
        .map(|p| (p, max_logprob(&log_probs[p])))
        .collect();
    open.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    open.into_iter().take(count).map(|(p, _)| p).collect()
}

/// Fixed-order positions committed at step `t` (0-based).
pub fn fixed_positions(order: Order, heads: usize, steps: usize, t: usize) -> Vec<usize> {
    let per = heads / steps;
    match order {
        Order::RightToLeft => (0..per).map(|i| heads - 1 - (t * per + i)).collect(),
        _ => (t * per..(t + 1) * per).collect(),
    }
}

/// A child produced by [`expand`]: its parent's index and the new state.
#[derive(Debug, Clone, PartialEq)]
pub struct Child {
    pub parent: usize,
    pub state: DecodeState,
}

/// Commits `positions[i]` in beam `i` with every code of its head and keeps
/// the global top `width` by log-probability, ties toward the lower token
/// id and then the earlier parent.
pub fn expand(
    beams: &[DecodeState],
    positions: &[usize],
    log_probs: &[&BlockLogProbs],
    width: usize,
    vocab: &VocabLayout,
) -> Result<Vec<Child>> {
    let mut cands: Vec<(f64, usize, usize, usize)> = Vec::new();
    for (i, beam) in beams.iter().enumerate() {
        let p = positions[i];
        if beam.is_filled(p, vocab) {
            return Err(Error::Invalid(format!("position {p} is already filled")));
        }
        let row = &log_probs[i][p];
        if row.len() != vocab.codebook_size {
            return Err(Error::Shape(format!("{} log-probabilities for {} codes", row.len(), vocab.codebook_size)));
        }
        for (c, &lp) in row.iter().enumerate() {
            cands.push((beam.logprob + lp, vocab.token(p, c), i, c));
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(cands
        .into_iter()
        .take(width)
        .map(|(logprob, token, parent, _)| {
            let mut state = beams[parent].clone();
            let p = positions[parent];
            state.tokens[p] = token;
            state.filled.push(p);
            state.logprob = logprob;
            Child { parent, state }
        })
        .collect())
}

/// A completed hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub sid: SemanticId,
    pub logprob: f64,
    /// Positions in the order they were committed.
    pub fill_order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Distinct blocks sorted by descending log-probability.
    pub hypotheses: Vec<Hypothesis>,
    /// Fewer than `k` distinct blocks survived.
    pub shortfall: bool,
}

struct Beam {
    state: DecodeState,
    schedule: Vec<usize>,
    scores: Option<Arc<BlockLogProbs>>,
}

fn refresh<S: BlockScorer + ?Sized>(scorer: &S, history: &[SemanticId], beams: &mut [Beam]) -> Result<()> {
    let stale: Vec<usize> = (0..beams.len()).filter(|&i| beams[i].scores.is_none()).collect();
    if stale.is_empty() {
        return Ok(());
    }
    let blocks: Vec<&[usize]> = stale.iter().map(|&i| beams[i].state.tokens.as_slice()).collect();
    let scores = scorer.score(history, &blocks)?;
    if scores.len() != stale.len() {
        return Err(Error::Shape(format!("{} score tables for {} blocks", scores.len(), stale.len())));
    }
    for (i, s) in stale.into_iter().zip(scores) {
        beams[i].scores = Some(Arc::new(s));
    }
    Ok(())
}

/// Generates ranked next-item blocks for one history.
pub fn decode<S: BlockScorer + ?Sized>(scorer: &S, history: &[SemanticId], config: &DecodeConfig) -> Result<Decoded> {
    decode_observed(scorer, history, config, &mut |_, _| {})
}

/// [`decode`] that reports the surviving beams after every step.
pub fn decode_observed<S: BlockScorer + ?Sized>(
    scorer: &S,
    history: &[SemanticId],
    config: &DecodeConfig,
    observe: &mut dyn FnMut(usize, &[DecodeState]),
) -> Result<Decoded> {
    let vocab = scorer.vocab();
    let m = vocab.heads;
    config.validate(m)?;
    let width = config.width();
    let per_step = m / config.steps;
    let mut beams = vec![Beam {
        state: DecodeState::empty(&vocab),
        schedule: Vec::new(),
        scores: None,
    }];
    for t in 0..config.steps {
        for b in beams.iter_mut() {
            b.scores = None;
        }
        refresh(scorer, history, &mut beams)?;
        for b in beams.iter_mut() {
            b.schedule = match config.order {
                Order::Adaptive => {
                    select_positions(&b.state, b.scores.as_ref().expect("scored"), per_step, &vocab)
                }
                fixed => fixed_positions(fixed, m, config.steps, t),
            };
        }
        for j in 0..per_step {
            if j > 0 && config.rerun == Rerun::PerPosition {
                refresh(scorer, history, &mut beams)?;
            }
            let states: Vec<DecodeState> = beams.iter().map(|b| b.state.clone()).collect();
            let positions: Vec<usize> = beams.iter().map(|b| b.schedule[j]).collect();
            let tables: Vec<&BlockLogProbs> = beams.iter().map(|b| &**b.scores.as_ref().expect("scored")).collect();
            let children = expand(&states, &positions, &tables, width, &vocab)?;
            beams = children
                .into_iter()
                .map(|c| Beam {
                    state: c.state,
                    schedule: beams[c.parent].schedule.clone(),
                    scores: match config.rerun {
                        Rerun::PerStep => beams[c.parent].scores.clone(),
                        Rerun::PerPosition => None,
                    },
                })
                .collect();
        }
        let states: Vec<DecodeState> = beams.iter().map(|b| b.state.clone()).collect();
        observe(t, &states);
    }
    let mut seen = HashSet::new();
    let mut hypotheses = Vec::new();
    // beams are already sorted by logprob, so the first copy of a block is the best
    for b in beams {
        let sid = b.state.sid(&vocab).ok_or_else(|| Error::Invalid("decode left a masked position".into()))?;
        if seen.insert(sid.clone()) {
            hypotheses.push(Hypothesis {
                sid,
                logprob: b.state.logprob,
                fill_order: b.state.filled,
            });
        }
    }
    hypotheses.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
    let shortfall = hypotheses.len() < config.k;
    Ok(Decoded { hypotheses, shortfall })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln(ps: &[f64]) -> Vec<f64> {
        ps.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn selects_most_confident_open_positions() {
        let vocab = VocabLayout::new(4, 2).unwrap();
        let state = DecodeState::empty(&vocab);
        let lp = vec![ln(&[0.9, 0.1]), ln(&[0.4, 0.6]), ln(&[0.7, 0.3]), ln(&[0.2, 0.8])];
        // max probs (0.9, 0.6, 0.7, 0.8)
        assert_eq!(select_positions(&state, &lp, 2, &vocab), vec![0, 3]);
        assert_eq!(select_positions(&state, &lp, 4, &vocab), vec![0, 3, 2, 1]);

        let vocab = VocabLayout::new(4, 1).unwrap();
        let single = vec![vec![0.9f64.ln()], vec![0.4f64.ln()], vec![0.7f64.ln()], vec![0.2f64.ln()]];
        assert_eq!(select_positions(&DecodeState::empty(&vocab), &single, 2, &vocab), vec![0, 2]);
    }

    #[test]
    fn selection_skips_filled_and_breaks_ties_low() {
        let vocab = VocabLayout::new(3, 2).unwrap();
        let mut state = DecodeState::empty(&vocab);
        state.tokens[0] = vocab.token(0, 1);
        state.filled.push(0);
        let lp = vec![vec![], ln(&[0.5, 0.5]), ln(&[0.5, 0.5])];
        assert_eq!(select_positions(&state, &lp, 2, &vocab), vec![1, 2]);
    }

    #[test]
    fn single_beam_keeps_top_children() {
        let vocab = VocabLayout::new(1, 4).unwrap();
        let lp = vec![ln(&[0.5, 0.3, 0.15, 0.05])];
        let kids = expand(&[DecodeState::empty(&vocab)], &[0], &[&lp], 2, &vocab).unwrap();
        let got: Vec<f64> = kids.iter().map(|c| c.state.logprob).collect();
        assert_eq!(got, vec![0.5f64.ln(), 0.3f64.ln()]);
        assert_eq!(kids[0].state.tokens, vec![0]);
        assert_eq!(kids[1].state.filled, vec![0]);
    }

    #[test]
    fn two_beams_match_child_enumeration() {
        let vocab = VocabLayout::new(2, 4).unwrap();
        let mut a = DecodeState::empty(&vocab);
        a.tokens[0] = vocab.token(0, 2);
        a.filled.push(0);
        a.logprob = -0.7;
        let mut b = a.clone();
        b.tokens[0] = vocab.token(0, 3);
        b.logprob = -1.1;
        let la = vec![vec![], ln(&[0.4, 0.3, 0.2, 0.1])];
        let lb = vec![vec![], ln(&[0.7, 0.1, 0.1, 0.1])];
        let kids = expand(&[a.clone(), b.clone()], &[1, 1], &[&la, &lb], 3, &vocab).unwrap();

        let mut all: Vec<(f64, usize, usize)> = Vec::new();
        for (pi, (s, l)) in [(&a, &la), (&b, &lb)].into_iter().enumerate() {
            for c in 0..4 {
                all.push((s.logprob + l[1][c], vocab.token(1, c), pi));
            }
        }
        all.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let want: Vec<(f64, usize, usize)> = all.into_iter().take(3).collect();
        let got: Vec<(f64, usize, usize)> = kids.iter().map(|c| (c.state.logprob, c.state.tokens[1], c.parent)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn expanding_a_filled_position_is_an_error() {
        let vocab = VocabLayout::new(1, 2).unwrap();
        let mut s = DecodeState::empty(&vocab);
        s.tokens[0] = 0;
        assert!(expand(&[s], &[0], &[&vec![ln(&[0.5, 0.5])]], 1, &vocab).is_err());
    }

    #[test]
    fn fixed_schedules() {
        assert_eq!(fixed_positions(Order::LeftToRight, 4, 2, 1), vec![2, 3]);
        assert_eq!(fixed_positions(Order::RightToLeft, 4, 2, 0), vec![3, 2]);
        assert_eq!(fixed_positions(Order::RightToLeft, 6, 3, 2), vec![1, 0]);
        let l2r: Vec<usize> = (0..4).flat_map(|t| fixed_positions(Order::LeftToRight, 4, 4, t)).collect();
        assert_eq!(l2r, vec![0, 1, 2, 3]);
    }

    #[test]
    fn config_validation_and_names() {
        let c = DecodeConfig::default();
        assert!(c.validate(4).is_ok());
        assert!(c.validate(6).is_err());
        assert!(DecodeConfig { beam: 0, ..c.clone() }.validate(4).is_err());
        assert!(DecodeConfig { k: 0, ..c.clone() }.validate(4).is_err());
        assert_eq!(DecodeConfig { mode: Mode::Greedy, ..c.clone() }.width(), 1);
        let json = serde_json::to_value(&c).unwrap();
        assert_eq!(json["T"], 4);
        assert_eq!(json["order"], "adaptive");
        let parsed: DecodeConfig = serde_json::from_str(r#"{"order":"right2left","rerun":"per_step"}"#).unwrap();
        assert_eq!(parsed.order, Order::RightToLeft);
        assert_eq!(parsed.rerun, Rerun::PerStep);
        assert!(serde_json::from_str::<DecodeConfig>(r#"{"beam":3}"#).is_err());
    }
}
