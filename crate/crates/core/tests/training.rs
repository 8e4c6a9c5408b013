use dgrec::nn::{AttentionPattern, Parameters};
use dgrec::predictor::{MaskPredictor, PredictorConfig, VocabLayout};
use dgrec::tokenizer::SemanticId;
use dgrec::training::{
    epoch_examples, loss_his_mask, loss_item_mask, sample_mask, train, write_train_log, TrainConfig, TrainExample,
    TrainTargets,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model<T: dgrec::nn::Scalar>(m: usize, k: usize, max_items: usize, seed: u64) -> MaskPredictor<T> {
    let cfg = PredictorConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        ffn_dim: 8,
        pattern: AttentionPattern::Bidirectional,
        max_items,
        seed,
        ..Default::default()
    };
    MaskPredictor::new(cfg, VocabLayout::new(m, k).unwrap()).unwrap()
}

/// A predictor whose every position outputs `softmax(bias)` of its head.
fn constant_predictor(m: usize, k: usize, max_items: usize, rng: &mut ChaCha8Rng) -> (MaskPredictor<f64>, Vec<f64>) {
    let mut p = model::<f64>(m, k, max_items, 4);
    let bias: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    p.output.weight.value.fill(0.0);
    p.output.bias.as_mut().unwrap().value.data_mut().copy_from_slice(&bias);
    (p, bias)
}

/// Independent oracle: `-ln softmax(bias_h)[code]` for every head and code.
fn nll_table(bias: &[f64], m: usize, k: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|h| {
            let row = &bias[h * k..(h + 1) * k];
            let z: f64 = row.iter().map(|b| b.exp()).sum();
            row.iter().map(|b| z.ln() - b).collect()
        })
        .collect()
}

fn random_examples(n: usize, m: usize, k: usize, max_hist: usize, rng: &mut ChaCha8Rng) -> Vec<TrainExample> {
    (0..n)
        .map(|_| {
            let h = rng.gen_range(0..=max_hist);
            TrainExample {
                history: (0..h).map(|_| (0..m).map(|_| rng.gen_range(0..k)).collect()).collect(),
                target: (0..m).map(|_| rng.gen_range(0..k)).collect(),
            }
        })
        .collect()
}

/// Exact expectation of the item-mask loss of a constant predictor when the
/// mask is redrawn until non-empty: each of the `n` eligible positions is
/// masked with probability `r / (1 - (1 - r)^n)`, weighted by `1 / r`.
fn expected_item_loss(ex: &[TrainExample], nll: &[Vec<f64>], r: f64) -> f64 {
    let m = nll.len();
    let z = 1.0 - (1.0 - r).powi(m as i32);
    let per: f64 = ex
        .iter()
        .map(|e| e.target.iter().enumerate().map(|(h, &c)| nll[h][c]).sum::<f64>())
        .sum();
    per / ex.len() as f64 / z
}

fn expected_his_loss(ex: &[TrainExample], nll: &[Vec<f64>], r: f64) -> f64 {
    let with: Vec<&TrainExample> = ex.iter().filter(|e| !e.history.is_empty()).collect();
    let total: f64 = with
        .iter()
        .map(|e| {
            let n = e.history.len() * nll.len();
            let s: f64 = e
                .history
                .iter()
                .flat_map(|sid| sid.iter().enumerate().map(|(h, &c)| nll[h][c]))
                .sum();
            s / (1.0 - (1.0 - r).powi(n as i32))
        })
        .sum();
    total / with.len() as f64
}

fn mc_item_loss(p: &mut MaskPredictor<f64>, ex: &[TrainExample], r: f64, rounds: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rounds).map(|_| loss_item_mask(p, ex, Some(r), &mut rng).unwrap()).sum::<f64>() / rounds as f64
}

#[test]
fn forced_ratio_masks_the_expected_fraction() {
    let tokens = vec![0usize; 100];
    let eligible: Vec<usize> = (0..100).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 10_000;
    let masked: usize = (0..draws)
        .map(|_| sample_mask(&tokens, &eligible, 7, Some(0.3), &mut rng).unwrap().positions.len())
        .sum();
    let frac = masked as f64 / (draws * 100) as f64;
    assert!((0.29..=0.31).contains(&frac), "fraction {frac}");
}

#[test]
fn inverse_ratio_weighting_cancels_with_many_heads() {
    // 32 heads: the redraw-until-non-empty bias (1 - r)^32 is below 1e-3
    let (m, k) = (32, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut p, bias) = constant_predictor(m, k, 1, &mut rng);
    let nll = nll_table(&bias, m, k);
    let ex = random_examples(2000, m, k, 1, &mut rng);
    let rs = [0.2, 0.5, 0.8];
    let est: Vec<f64> = rs.iter().map(|&r| mc_item_loss(&mut p, &ex, r, 10, 5)).collect();
    let hi = est.iter().cloned().fold(f64::MIN, f64::max);
    let lo = est.iter().cloned().fold(f64::MAX, f64::min);
    assert!(hi / lo - 1.0 < 0.02, "estimates {est:?}");
    for (&r, &e) in rs.iter().zip(&est) {
        let exact = expected_item_loss(&ex, &nll, r);
        assert!((e / exact - 1.0).abs() < 0.01, "r={r}: {e} vs {exact}");
    }
}

#[test]
fn small_head_count_matches_redraw_corrected_expectation() {
    let (m, k) = (2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut p, bias) = constant_predictor(m, k, 3, &mut rng);
    let nll = nll_table(&bias, m, k);
    let ex = random_examples(1000, m, k, 3, &mut rng);
    for r in [0.2, 0.5, 0.8] {
        let e = mc_item_loss(&mut p, &ex, r, 20, 3);
        let exact = expected_item_loss(&ex, &nll, r);
        assert!((e / exact - 1.0).abs() < 0.02, "item r={r}: {e} vs {exact}");

        let mut mrng = ChaCha8Rng::seed_from_u64(13);
        let h = (0..20).map(|_| loss_his_mask(&mut p, &ex, Some(r), &mut mrng).unwrap()).sum::<f64>() / 20.0;
        let exact = expected_his_loss(&ex, &nll, r);
        assert!((h / exact - 1.0).abs() < 0.02, "history r={r}: {h} vs {exact}");
    }
}

fn toy_prefixes(users: usize, m: usize, k: usize, seed: u64) -> Vec<Vec<SemanticId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..users)
        .map(|_| {
            let len = rng.gen_range(2..7);
            let start = rng.gen_range(0..k);
            (0..len).map(|i| (0..m).map(|h| (start + i + h) % k).collect()).collect()
        })
        .collect()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 16,
        lr: 5e-3,
        patience: 10,
        targets: TrainTargets::All,
        seed: 17,
        ..Default::default()
    }
}

#[test]
fn training_is_deterministic_and_lowers_the_loss() {
    let prefixes = toy_prefixes(60, 2, 4, 1);
    let run = || {
        let mut p = model::<f32>(2, 4, 4, 2);
        let out = train(&mut p, &prefixes, &small_config(), &mut |_| Ok(0.0)).unwrap();
        (p.flat_values(), out)
    };
    let (w1, o1) = run();
    let (w2, o2) = run();
    assert_eq!(w1, w2);
    let losses = |o: &dgrec::training::TrainOutcome| o.log.iter().map(|r| r.loss_total).collect::<Vec<_>>();
    assert_eq!(losses(&o1), losses(&o2));
    let l = losses(&o1);
    assert!(l.last().unwrap() < l.first().unwrap(), "{l:?}");
    assert!(o1.log.iter().all(|r| r.loss_item >= 0.0 && r.loss_his >= 0.0));
}

#[test]
fn best_validation_parameters_are_restored() {
    let prefixes = toy_prefixes(40, 2, 4, 2);
    let mut p = model::<f32>(2, 4, 4, 3);
    let mut calls = 0;
    let mut snapshot = Vec::new();
    let out = train(&mut p, &prefixes, &small_config(), &mut |m| {
        calls += 1;
        if calls == 2 {
            snapshot = m.flat_values();
            return Ok(0.9);
        }
        Ok(0.1)
    })
    .unwrap();
    assert_eq!(out.best_epoch, Some(1));
    assert_eq!(out.best_val, Some(0.9));
    assert_eq!(p.flat_values(), snapshot);
}

#[test]
fn patience_stops_training_early() {
    let prefixes = toy_prefixes(40, 2, 4, 2);
    let mut p = model::<f32>(2, 4, 4, 3);
    let cfg = TrainConfig {
        epochs: 50,
        patience: 2,
        ..small_config()
    };
    let out = train(&mut p, &prefixes, &cfg, &mut |_| Ok(0.5)).unwrap();
    assert_eq!(out.log.len(), 3);
}

#[test]
fn train_log_has_expected_header() {
    let prefixes = toy_prefixes(20, 2, 4, 5);
    let mut p = model::<f32>(2, 4, 4, 3);
    let cfg = TrainConfig {
        epochs: 2,
        ..small_config()
    };
    let out = train(&mut p, &prefixes, &cfg, &mut |_| Ok(0.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train_log.csv");
    write_train_log(&path, &out.log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "epoch,step,loss_total,loss_item,loss_his,val_recall@10,wall_ms"
    );
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn prefixes_too_short_are_rejected() {
    let mut p = model::<f32>(2, 4, 4, 3);
    let prefixes = vec![vec![vec![0, 1]]];
    assert!(train(&mut p, &prefixes, &small_config(), &mut |_| Ok(0.0)).is_err());
}

proptest! {
    #[test]
    fn sample_mask_is_consistent(
        len in 1usize..40,
        picks in proptest::collection::vec(any::<bool>(), 40),
        ratio in proptest::option::of(0.01f64..=1.0),
        seed in any::<u64>(),
    ) {
        let tokens: Vec<usize> = (0..len).collect();
        let eligible: Vec<usize> = (0..len).filter(|&i| picks[i]).collect();
        prop_assume!(!eligible.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_mask(&tokens, &eligible, 1000, ratio, &mut rng).unwrap();
        prop_assert!(!s.positions.is_empty());
        prop_assert!(s.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.ratio > 0.0 && s.ratio <= 1.0);
        for i in 0..len {
            let is_masked = s.positions.contains(&i);
            prop_assert!(!is_masked || eligible.contains(&i));
            prop_assert_eq!(s.masked[i], if is_masked { 1000 } else { i });
        }
        prop_assert_eq!(&s.original, &tokens);
    }

    #[test]
    fn losses_are_finite_and_non_negative(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = model::<f64>(3, 4, 3, seed % 7);
        let ex = random_examples(n, 3, 4, 3, &mut rng);
        let li = loss_item_mask(&mut p, &ex, None, &mut rng).unwrap();
        prop_assert!(li.is_finite() && li >= 0.0);
        if ex.iter().any(|e| !e.history.is_empty()) {
            let lh = loss_his_mask(&mut p, &ex, None, &mut rng).unwrap();
            prop_assert!(lh.is_finite() && lh >= 0.0);
        }
    }

    #[test]
    fn every_mode_yields_valid_examples(seed in any::<u64>(), max_items in 1usize..5) {
        let prefixes = toy_prefixes(10, 2, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mode in [TrainTargets::All, TrainTargets::Last, TrainTargets::Random] {
            for e in epoch_examples(&prefixes, mode, max_items, &mut rng) {
                prop_assert!(e.history.len() <= max_items && !e.history.is_empty());
                prop_assert_eq!(e.target.len(), 2);
            }
        }
    }
}
