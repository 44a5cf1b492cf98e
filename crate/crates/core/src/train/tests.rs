use super::*;
use crate::autodiff::Tape;
use crate::model::forward::ForwardOptions;
use crate::model::params::ModelKind;
use crate::model::{ModelConfig, StateModel};
use crate::text::synth::{generate_synthetic_corpus, SyntheticWorldConfig};
use crate::text::vocab::NONE_ID;
use crate::text::{AnonymizedExample, Vocabulary};

fn tiny_world(seed: u64) -> SyntheticWorldConfig {
    let t = |s: &str| s.to_string();
    SyntheticWorldConfig {
        n_latent_states: 2,
        n_entities_range: (2, 3),
        n_sentences_range: (5, 7),
        name_pool: ["Ada", "Ben", "Cleo", "Dan", "Eve"].iter().map(|s| s.to_string()).collect(),
        templates: vec![
            vec![t("{} walks in the sun ."), t("{} waves at the crowd ."), t("wind moves the grass .")],
            vec![t("{} rests in the dark hall ."), t("{} mourns by the old stone .")],
        ],
        transition_matrix: vec![vec![0.7, 0.3], vec![0.4, 0.6]],
        seed,
    }
}

fn setup(seed: u64, n: usize) -> (Vec<AnonymizedExample>, Vocabulary, ModelConfig) {
    let (examples, vocab) = generate_synthetic_corpus(&tiny_world(seed), n).unwrap();
    let mut config = ModelConfig::micro(vocab.len());
    config.max_seq_len = 64;
    (examples, vocab, config)
}

fn train_cfg(stage: ModelKind, steps: u64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(stage, steps, seed);
    cfg.batch_size = 4;
    cfg.max_seq_len = 64;
    cfg.checkpoint_every = 1000;
    cfg
}

#[test]
fn loss_decreases_over_fifty_steps() {
    let (examples, vocab, config) = setup(41, 16);
    let cfg = train_cfg(ModelKind::State, 50, 7);
    let mut trainer = Trainer::new(&config, &cfg).unwrap();
    let mut first = None;
    let mut last = 0.0;
    for step in 0..50 {
        let idx = batch_for_step(examples.len(), cfg.batch_size, cfg.seed, step);
        let batch: Vec<&AnonymizedExample> = idx.iter().map(|&i| &examples[i]).collect();
        let losses = trainer.train_step(&vocab, &batch).unwrap();
        if step == 0 {
            first = Some(losses.total);
        }
        last = losses.total;
    }
    let first = first.unwrap();
    assert!(last < first, "loss should drop: first {first:.4}, last {last:.4}");
}

#[test]
fn codebook_stays_unit_norm_and_none_row_stays_zero() {
    let (examples, vocab, config) = setup(42, 8);
    let cfg = train_cfg(ModelKind::State, 12, 3);
    let mut trainer = Trainer::new(&config, &cfg).unwrap();
    for step in 0..12 {
        let idx = batch_for_step(examples.len(), cfg.batch_size, cfg.seed, step);
        let batch: Vec<&AnonymizedExample> = idx.iter().map(|&i| &examples[i]).collect();
        trainer.train_step(&vocab, &batch).unwrap();
    }
    let model = trainer.state_model().unwrap();
    for row in model.params.get("codebook").data.chunks(config.state_dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    let d = config.d_model;
    let tok = model.params.get("tok_emb");
    assert!(tok.data[NONE_ID * d..(NONE_ID + 1) * d].iter().all(|&v| v == 0.0));
}

#[test]
fn fixed_seed_gives_identical_trajectory() {
    let (examples, vocab, config) = setup(43, 10);
    let run = || {
        let cfg = train_cfg(ModelKind::State, 6, 11);
        let mut trainer = Trainer::new(&config, &cfg).unwrap();
        let mut losses = Vec::new();
        for step in 0..6 {
            let idx = batch_for_step(examples.len(), cfg.batch_size, cfg.seed, step);
            let batch: Vec<&AnonymizedExample> = idx.iter().map(|&i| &examples[i]).collect();
            losses.push(trainer.train_step(&vocab, &batch).unwrap().total);
        }
        losses
    };
    assert_eq!(run(), run());
}

#[test]
fn batch_mean_matches_per_example_sums() {
    // The batch LM loss is the token-mean over all examples: identical to
    // combining the per-example sums, so shorter examples contribute
    // nothing where they have no tokens.
    let (examples, _vocab, config) = setup(44, 4);
    let model = StateModel::new(config, 5).unwrap();
    let batch: Vec<&AnonymizedExample> = examples.iter().take(2).collect();
    let mut tape = Tape::new();
    let fwd = model.forward_batch(&mut tape, &batch, &ForwardOptions::default()).unwrap();
    let mut sum = 0.0;
    let mut count = 0usize;
    for exf in &fwd.examples {
        sum += tape.value(exf.lm_sum)[0];
        count += exf.lm_count;
    }
    let lm = tape.value(fwd.lm)[0];
    assert!((lm - sum / count as f64).abs() < 1e-12);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (examples, vocab, config) = setup(45, 10);
    let dir = tempfile::tempdir().unwrap();
    let ckpt_dir_a = dir.path().join("a");
    let ckpt_dir_b = dir.path().join("b");
    std::fs::create_dir_all(&ckpt_dir_a).unwrap();
    std::fs::create_dir_all(&ckpt_dir_b).unwrap();

    // Uninterrupted: 8 steps.
    let cfg_a = train_cfg(ModelKind::State, 8, 17);
    let sum_a = train_loop(&config, &cfg_a, &examples, &vocab, &ckpt_dir_a, &ckpt_dir_a.join("loss.jsonl")).unwrap();

    // Interrupted: 4 steps, then resume to 8 in the same directory.
    let cfg_half = train_cfg(ModelKind::State, 4, 17);
    train_loop(&config, &cfg_half, &examples, &vocab, &ckpt_dir_b, &ckpt_dir_b.join("loss.jsonl")).unwrap();
    let cfg_rest = train_cfg(ModelKind::State, 8, 17);
    let sum_b = train_loop(&config, &cfg_rest, &examples, &vocab, &ckpt_dir_b, &ckpt_dir_b.join("loss.jsonl")).unwrap();

    assert_eq!(sum_b.records.first().unwrap().step, 5);
    let tail_a: Vec<f64> = sum_a.records.iter().skip(4).map(|r| r.total).collect();
    let tail_b: Vec<f64> = sum_b.records.iter().map(|r| r.total).collect();
    assert_eq!(tail_a, tail_b, "resumed losses must match the uninterrupted run bit for bit");
}

#[test]
fn loss_log_steps_are_monotone() {
    let (examples, vocab, config) = setup(46, 8);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("loss.jsonl");
    let cfg = train_cfg(ModelKind::State, 5, 2);
    train_loop(&config, &cfg, &examples, &vocab, dir.path(), &log).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let steps: Vec<u64> = text
        .lines()
        .map(|l| serde_json::from_str::<LossRecord>(l).unwrap().step)
        .collect();
    assert_eq!(steps, (1..=5).collect::<Vec<_>>());
}

#[test]
fn mention_stage_trains_and_checkpoints_without_codebook() {
    let (examples, vocab, config) = setup(47, 8);
    let dir = tempfile::tempdir().unwrap();
    let cfg = train_cfg(ModelKind::Mention, 4, 9);
    let summary =
        train_loop(&config, &cfg, &examples, &vocab, dir.path(), &dir.path().join("loss.jsonl")).unwrap();
    let ckpt = crate::model::load_checkpoint(&summary.final_checkpoint).unwrap();
    assert_eq!(ckpt.kind, ModelKind::Mention);
    assert!(!ckpt.params.contains("codebook"));
    assert!(summary.records.iter().all(|r| r.ent == 0.0 && r.cl == 0.0));
}

#[test]
fn zero_max_steps_saves_initial_checkpoint() {
    let (examples, vocab, config) = setup(48, 6);
    let dir = tempfile::tempdir().unwrap();
    let cfg = train_cfg(ModelKind::State, 0, 1);
    let summary =
        train_loop(&config, &cfg, &examples, &vocab, dir.path(), &dir.path().join("loss.jsonl")).unwrap();
    assert_eq!(summary.final_step, 0);
    assert!(summary.final_checkpoint.exists());
}
