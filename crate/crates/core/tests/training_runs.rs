mod common;

use common::*;
use xwalk_core::eval::AnswerTokens;
use xwalk_core::lm::{init_model, ModelConfig, ModelParams};
use xwalk_core::lora::{attach, trainable_tensors, LoraConfig};
use xwalk_core::prompting::TokenizedPrompt;
use xwalk_core::training::{train, EpochRecord, TrainConfig, TrainOptions, TrainOutcome, TrainState};

struct Setup {
    model: ModelParams<f32>,
    train_set: Vec<TokenizedPrompt>,
    val_set: Vec<TokenizedPrompt>,
    answers: AnswerTokens,
}

fn setup() -> Setup {
    let vocab = toy_vocab();
    let mc = ModelConfig { vocab_size: vocab.len(), max_seq_len: 16, d_model: 16, n_heads: 2, d_ff: 32, ..toy_config(vocab.len()) };
    Setup {
        model: attach(init_model::<f32>(&mc).unwrap(), &LoraConfig::default(), 4).unwrap(),
        train_set: toy_examples(&vocab, 64, 1),
        val_set: toy_examples(&vocab, 24, 2),
        answers: AnswerTokens::of(&vocab),
    }
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig { max_epochs: epochs, patience: 100, warmup_steps: 3, threads: 1, ..TrainConfig::default() }
}

fn run(s: &Setup, cfg: &TrainConfig, opts: TrainOptions<'_, f32>) -> TrainOutcome<f32> {
    train(s.model.clone(), &s.train_set, &s.val_set, s.answers, cfg, opts).unwrap()
}

fn adapters(m: &ModelParams<f32>) -> Vec<Vec<f32>> {
    trainable_tensors(m).iter().map(|n| m.tensor(n).unwrap().iter().copied().collect()).collect()
}

fn without_timing(h: &[EpochRecord]) -> Vec<EpochRecord> {
    h.iter().map(|r| EpochRecord { seconds: 0.0, ..r.clone() }).collect()
}

#[test]
fn equal_seeds_give_identical_runs() {
    let s = setup();
    let a = run(&s, &config(4), TrainOptions::default());
    let b = run(&s, &config(4), TrainOptions::default());
    assert_eq!(adapters(&a.model), adapters(&b.model));
    assert_eq!(without_timing(&a.history), without_timing(&b.history));
}

#[test]
fn interrupted_and_resumed_run_matches_a_straight_run() {
    let s = setup();
    let cfg = config(6);
    let straight = run(&s, &cfg, TrainOptions::default());

    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    let first = run(&s, &cfg, TrainOptions { log_path: Some(&log), epoch_limit: Some(2), ..Default::default() });
    assert_eq!(first.history.len(), 2);
    let state_path = dir.path().join("state.json");
    first.state.save(&state_path).unwrap();
    let restored = TrainState::<f32>::load(&state_path).unwrap();
    let resumed = run(&s, &cfg, TrainOptions { log_path: Some(&log), resume: Some(restored), epoch_limit: None });

    assert_eq!(adapters(&resumed.model), adapters(&straight.model));
    assert_eq!(without_timing(&resumed.history), without_timing(&straight.history));
    assert_eq!(resumed.best_epoch, straight.best_epoch);
    let rows = std::fs::read_to_string(&log).unwrap().lines().count();
    assert_eq!(rows, 1 + 6);
}

#[test]
fn logged_learning_rates_follow_the_cosine_oracle() {
    let s = setup();
    let cfg = config(5);
    let out = run(&s, &cfg, TrainOptions::default());
    let total = cfg.total_steps(s.train_set.len());
    assert_eq!(out.history.last().unwrap().step, total);
    for r in &out.history {
        let want = cosine_oracle(r.step, total, cfg.warmup_steps, cfg.learning_rate);
        assert!((r.lr - want).abs() < 1e-15, "epoch {}: {} vs {want}", r.epoch, r.lr);
    }
    assert_eq!(out.history.last().unwrap().lr, 0.0);
}

#[test]
fn adapters_learn_a_last_token_rule() {
    let s = setup();
    let cfg = TrainConfig { learning_rate: 1e-2, ..config(40) };
    let out = run(&s, &cfg, TrainOptions::default());
    assert!(out.best_score >= 0.9, "best validation balanced accuracy {}", out.best_score);
    let first_loss = out.history[0].train_loss;
    let last_loss = out.history.last().unwrap().train_loss;
    assert!(last_loss < first_loss);
}

#[test]
fn patience_stops_a_stalled_run() {
    let s = setup();
    let cfg = TrainConfig { learning_rate: 1e-9, patience: 2, ..config(30) };
    let out = run(&s, &cfg, TrainOptions::default());
    assert!(out.stopped_early);
    assert!(out.history.len() < 30);
    assert_eq!(out.history.len(), out.best_epoch + 2);
}
