#![allow(dead_code)]

use dgrec::decode::{BlockLogProbs, BlockScorer};
use dgrec::predictor::VocabLayout;
use dgrec::tokenizer::SemanticId;
use dgrec::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A deterministic "model" whose distribution at each masked position is a
/// pseudo-random function of the history, the partial block and the
/// position.
pub struct HashScorer {
    pub vocab: VocabLayout,
    pub seed: u64,
    pub spread: f64,
}

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2)).wrapping_mul(0x100_0000_01b3)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln() + mx;
    logits.iter().map(|l| l - z).collect()
}

impl HashScorer {
    pub fn new(heads: usize, codes: usize, seed: u64) -> Self {
        Self {
            vocab: VocabLayout::new(heads, codes).unwrap(),
            seed,
            spread: 3.0,
        }
    }

    pub fn position(&self, history: &[SemanticId], block: &[usize], pos: usize) -> Vec<f64> {
        let mut h = mix(self.seed, pos as u64);
        for c in history.iter().flatten() {
            h = mix(h, *c as u64);
        }
        for &t in block {
            h = mix(h, t as u64 + 1_000_000);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab.codebook_size).map(|_| rng.gen_range(-self.spread..self.spread)).collect();
        log_softmax(&logits)
    }
}

impl BlockScorer for HashScorer {
    fn vocab(&self) -> VocabLayout {
        self.vocab
    }

    fn score(&self, history: &[SemanticId], blocks: &[&[usize]]) -> Result<Vec<BlockLogProbs>> {
        Ok(blocks
            .iter()
            .map(|b| {
                (0..self.vocab.heads)
                    .map(|p| if b[p] == self.vocab.mask() { self.position(history, b, p) } else { Vec::new() })
                    .collect()
            })
            .collect())
    }
}

/// Positions of a block ordered by descending max log-probability, ties low.
pub fn by_confidence(block: &[usize], lp: &[Vec<f64>], mask: usize) -> Vec<usize> {
    let mut open: Vec<usize> = (0..block.len()).filter(|&p| block[p] == mask).collect();
    let conf = |p: usize| lp[p].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    open.sort_by(|&a, &b| conf(b).partial_cmp(&conf(a)).unwrap().then(a.cmp(&b)));
    open
}

/// Temperature-0 iterative unmasking of a single sequence: at each step pick
/// the `M/T` most confident masked positions and set each to its argmax,
/// querying the distribution again after every commitment.
pub fn greedy_unmask(
    dist: &dyn Fn(&[usize], usize) -> Vec<f64>,
    vocab: VocabLayout,
    steps: usize,
) -> (Vec<usize>, f64) {
    let m = vocab.heads;
    let mut block = vec![vocab.mask(); m];
    let mut total = 0.0;
    for _ in 0..steps {
        let lp: Vec<Vec<f64>> = (0..m)
            .map(|p| if block[p] == vocab.mask() { dist(&block, p) } else { Vec::new() })
            .collect();
        let chosen: Vec<usize> = by_confidence(&block, &lp, vocab.mask()).into_iter().take(m / steps).collect();
        for (j, &p) in chosen.iter().enumerate() {
            let row = if j == 0 { lp[p].clone() } else { dist(&block, p) };
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            total += row[best];
            block[p] = vocab.token(p, best);
        }
    }
    (block.iter().map(|&t| vocab.code_of(t).unwrap()).collect(), total)
}
