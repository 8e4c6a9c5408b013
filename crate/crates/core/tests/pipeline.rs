use dgrec::corpus::SyntheticConfig;
use dgrec::decode::DecodeConfig;
use dgrec::eval::read_results;
use dgrec::pipeline::*;
use dgrec::predictor::PredictorConfig;
use dgrec::tokenizer::TokenizerConfig;
use dgrec::training::{TrainConfig, TrainTargets};
use std::path::Path;

fn tiny_config(root: &Path) -> RunConfig {
    RunConfig {
        dataset: "tiny".into(),
        seed: 3,
        paths: Paths {
            interactions: root.join("data/interactions.jsonl"),
            embeddings: root.join("data/embeddings.bin"),
            labels: root.join("data/labels.jsonl"),
            workdir: root.join("run"),
        },
        synth: SyntheticConfig {
            n_items: 60,
            n_users: 150,
            seq_len: 6,
            n_clusters: 6,
            dim: 16,
            ..Default::default()
        },
        tokenizer: TokenizerConfig {
            heads: 2,
            codebook_size: 8,
            sub_dim: 4,
            hidden: vec![32],
            epochs: 40,
            batch_size: 64,
            revive_every: 10,
            ..Default::default()
        },
        predictor: PredictorConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            ffn_dim: 32,
            max_items: 4,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 3,
            batch_size: 32,
            targets: TrainTargets::Random,
            ..Default::default()
        },
        decode: DecodeConfig {
            steps: 2,
            beam: 5,
            k: 5,
            ..Default::default()
        },
        eval: EvalConfig {
            valid_users: 40,
            test_users: 60,
            ..Default::default()
        },
    }
    .resolved()
}

fn run_all(cfg: &RunConfig) -> Vec<u8> {
    synth_data(cfg).unwrap();
    train_tokenizer_stage(cfg).unwrap();
    tokenize_stage(cfg).unwrap();
    train_stage(cfg).unwrap();
    evaluate_stage(cfg).unwrap();
    std::fs::read(cfg.artifact(RESULTS_FILE)).unwrap()
}

#[test]
fn stages_chain_and_repeat_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = tiny_config(a.path());
    let cb = tiny_config(b.path());
    ca.validate().unwrap();
    let ra = run_all(&ca);
    let rb = run_all(&cb);
    assert_eq!(ra, rb);
    for f in [TOKENIZER_FILE, SIDS_FILE, MODEL_FILE, TRAIN_LOG_FILE, GENERATIONS_FILE, TOKENIZER_REPORT_FILE] {
        assert!(ca.artifact(f).exists(), "{f}");
    }
    let rows = read_results(&ca.artifact(RESULTS_FILE)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].users, 60);
    assert_eq!(rows[0].dataset, "tiny");

    let gens = decode_stage(&ca).unwrap();
    assert!(gens.iter().all(|g| g.rank >= 1 && g.sid.len() == 2));
}

#[test]
fn ablation_emits_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.train.epochs = 1;
    cfg.eval.test_users = 20;
    run_all(&cfg);
    let rows = ablate_stage(&cfg).unwrap();
    assert_eq!(rows.len(), 3 + step_divisors(2).len() + 4);
    let orders: Vec<&str> = rows[..3].iter().map(|r| r.order.as_str()).collect();
    assert_eq!(orders, ["adaptive", "left2right", "right2left"]);
    assert_eq!(rows[3].steps, 1);
    assert_eq!(rows[4].steps, 2);
    assert_eq!(rows.last().unwrap().model, "dgrec-intra-item-causal");
    assert_eq!(read_results(&cfg.artifact(RESULTS_FILE)).unwrap(), rows);
}

#[test]
fn missing_artifacts_are_validation_errors_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let err = evaluate_stage(&cfg).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("model.ckpt"), "{err}");
}

#[test]
fn seed_reaches_every_component() {
    let cfg = RunConfig { seed: 42, ..Default::default() }.resolved();
    assert_eq!(cfg.synth.seed, 42);
    assert_eq!(cfg.tokenizer.seed, 42);
    assert_eq!(cfg.predictor.seed, 42);
    assert_eq!(cfg.train.seed, 42);
    assert_eq!(cfg.dataset, "synthetic");
}

#[test]
fn user_subsets_are_sorted_and_stable() {
    let a = user_subset(100, 10, 1);
    assert_eq!(a, user_subset(100, 10, 1));
    assert_eq!(a.len(), 10);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(user_subset(5, 0, 1), vec![0, 1, 2, 3, 4]);
}
