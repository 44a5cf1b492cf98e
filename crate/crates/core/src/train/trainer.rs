//! Deterministic training orchestration for both stages: forward,
//! backward, Adam, codebook renormalization, loss logging, checkpoints,
//! and resume.

use crate::autodiff::Tape;
use crate::error::{CoreError, Result};
use crate::model::checkpoint::{load_checkpoint_expecting, save_checkpoint};
use crate::model::forward::{extract_grads, ForwardOptions, MentionItem};
use crate::model::params::ModelKind;
use crate::model::quantize::renormalize_codebook;
use crate::model::{LossBreakdown, MentionModel, ModelConfig, StateModel};
use crate::text::vocab::NONE_ID;
use crate::text::{build_stage2_target, AnonymizedExample, Vocabulary};
use crate::train::adam::{Adam, AdamConfig};
use crate::train::batch::{batch_for_step, fit_example};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub max_seq_len: usize,
    pub stage: ModelKind,
    /// Train the "no states" ablation: zero state vectors, no sentence
    /// encoder, no contrastive loss.
    #[serde(default)]
    pub zero_states: bool,
}

impl TrainConfig {
    pub fn new(stage: ModelKind, max_steps: u64, seed: u64) -> Self {
        TrainConfig {
            batch_size: 12,
            learning_rate: 1e-4,
            max_steps,
            seed,
            checkpoint_every: 500,
            max_seq_len: 512,
            stage,
            zero_states: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(CoreError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lm: f64,
    pub ent: f64,
    pub cl: f64,
    pub total: f64,
}

pub struct TrainSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub records: Vec<LossRecord>,
    pub final_checkpoint: PathBuf,
}

enum Stage {
    State(StateModel),
    Mention(MentionModel),
}

/// Owns a model plus optimizer state and advances them one batch at a
/// time. Construction seeds everything from the train seed, so a fixed
/// seed gives a bit-identical loss trajectory.
pub struct Trainer {
    stage: Stage,
    opt: Adam,
    step: u64,
    train_config: TrainConfig,
}

impl Trainer {
    pub fn new(model_config: &ModelConfig, train_config: &TrainConfig) -> Result<Self> {
        train_config.validate()?;
        model_config.validate()?;
        let adam_cfg = AdamConfig::new(train_config.learning_rate);
        let (stage, opt) = match train_config.stage {
            ModelKind::State => {
                let model = StateModel::new(model_config.clone(), train_config.seed)?;
                let opt = Adam::new(&model.params, adam_cfg);
                (Stage::State(model), opt)
            }
            ModelKind::Mention => {
                let model = MentionModel::new(model_config.clone(), train_config.seed)?;
                let opt = Adam::new(&model.params, adam_cfg);
                (Stage::Mention(model), opt)
            }
        };
        Ok(Trainer { stage, opt, step: 0, train_config: train_config.clone() })
    }

    /// Rebuild a trainer from a checkpoint, restoring optimizer moments
    /// and the step counter so the continuation matches an uninterrupted
    /// run on the same seed stream.
    pub fn resume(path: &Path, train_config: &TrainConfig) -> Result<Self> {
        train_config.validate()?;
        let ckpt = load_checkpoint_expecting(path, train_config.stage, None)?;
        let adam_cfg = AdamConfig::new(train_config.learning_rate);
        let opt = Adam::restore(&ckpt.params, adam_cfg, &ckpt.extra)?;
        let stage = match train_config.stage {
            ModelKind::State => Stage::State(StateModel::from_parts(ckpt.config, ckpt.params)?),
            ModelKind::Mention => Stage::Mention(MentionModel::from_parts(ckpt.config, ckpt.params)?),
        };
        Ok(Trainer { stage, opt, step: ckpt.step, train_config: train_config.clone() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn model_config(&self) -> &ModelConfig {
        match &self.stage {
            Stage::State(m) => &m.config,
            Stage::Mention(m) => &m.config,
        }
    }

    pub fn state_model(&self) -> Option<&StateModel> {
        match &self.stage {
            Stage::State(m) => Some(m),
            Stage::Mention(_) => None,
        }
    }

    pub fn mention_model(&self) -> Option<&MentionModel> {
        match &self.stage {
            Stage::Mention(m) => Some(m),
            Stage::State(_) => None,
        }
    }

    /// One forward/backward/update on a prepared batch.
    pub fn train_step(
        &mut self,
        vocab: &Vocabulary,
        batch: &[&AnonymizedExample],
    ) -> Result<LossBreakdown> {
        let max_len = self.train_config.max_seq_len.min(self.model_config().max_seq_len);
        let fitted: Vec<std::borrow::Cow<AnonymizedExample>> =
            batch.iter().map(|ex| fit_example(vocab, ex, max_len)).collect();
        let refs: Vec<&AnonymizedExample> = fitted.iter().map(|c| c.as_ref()).collect();

        let mut tape = Tape::new();
        let (losses, mut grads) = match &self.stage {
            Stage::State(model) => {
                let opts = ForwardOptions { zero_states: self.train_config.zero_states, ..Default::default() };
                let fwd = model.forward_batch(&mut tape, &refs, &opts)?;
                tape.backward(fwd.total)?;
                (fwd.losses(&tape), extract_grads(&tape, &fwd.bound, &model.params))
            }
            Stage::Mention(model) => {
                let targets: Vec<Vec<usize>> =
                    refs.iter().map(|ex| build_stage2_target(vocab, ex)).collect();
                let srcs: Vec<Vec<usize>> = refs
                    .iter()
                    .map(|ex| {
                        let mut s = ex.input_ids.clone();
                        s.extend_from_slice(&ex.output_ids);
                        s
                    })
                    .collect();
                let items: Vec<MentionItem> = srcs
                    .iter()
                    .zip(targets.iter())
                    .map(|(s, t)| MentionItem { src_ids: s, target_ids: t })
                    .collect();
                let fwd = model.forward_batch(&mut tape, &items)?;
                tape.backward(fwd.total)?;
                let lm = tape.value(fwd.lm)[0];
                (
                    LossBreakdown { lm, ent: 0.0, cl: 0.0, total: lm },
                    extract_grads(&tape, &fwd.bound, &model.params),
                )
            }
        };

        if !losses.total.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                step: self.step,
                detail: format!("lm={} ent={} cl={}", losses.lm, losses.ent, losses.cl),
            });
        }

        // The <none> embedding is pinned at zero: mask its gradient so the
        // optimizer never touches the row.
        let params = match &mut self.stage {
            Stage::State(m) => &mut m.params,
            Stage::Mention(m) => &mut m.params,
        };
        let d = params.get("tok_emb").dims2()?.1;
        if let Some(tok_idx) = params.names().position(|n| n == "tok_emb") {
            grads[tok_idx][NONE_ID * d..(NONE_ID + 1) * d].fill(0.0);
        }

        self.opt.step(params, &mut grads)?;
        if params.contains("codebook") {
            renormalize_codebook(params.get_mut("codebook"));
        }
        self.step += 1;
        Ok(losses)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (kind, config, params) = match &self.stage {
            Stage::State(m) => (ModelKind::State, &m.config, &m.params),
            Stage::Mention(m) => (ModelKind::Mention, &m.config, &m.params),
        };
        let extra = self.opt.export(params);
        save_checkpoint(path, kind, config, self.step, params, &extra)
    }
}

/// Find the newest `step_*.ckpt` in a directory.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).ok()?.flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(step) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(step) = step.parse::<u64>() {
                if best.as_ref().map_or(true, |(b, _)| step > *b) {
                    best = Some((step, entry.path()));
                }
            }
        }
    }
    best.map(|(_, p)| p)
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

/// Run (or resume) training to `max_steps`, appending one JSONL loss
/// record per step and checkpointing periodically. A non-finite loss
/// aborts after dumping the offending batch for inspection.
pub fn train_loop(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    examples: &[AnonymizedExample],
    vocab: &Vocabulary,
    checkpoint_dir: &Path,
    loss_log: &Path,
) -> Result<TrainSummary> {
    if examples.is_empty() {
        return Err(CoreError::Structural("training corpus is empty".into()));
    }
    std::fs::create_dir_all(checkpoint_dir)?;
    let mut trainer = match latest_checkpoint(checkpoint_dir) {
        Some(path) => {
            log::info!("resuming from {}", path.display());
            Trainer::resume(&path, train_config)?
        }
        None => Trainer::new(model_config, train_config)?,
    };

    let mut log_file = std::fs::OpenOptions::new().create(true).append(true).open(loss_log)?;
    let mut records = Vec::new();
    let steps_before = trainer.step_count();

    if trainer.step_count() >= train_config.max_steps {
        let path = checkpoint_path(checkpoint_dir, trainer.step_count());
        trainer.save(&path)?;
        return Ok(TrainSummary {
            steps_run: 0,
            final_step: trainer.step_count(),
            records,
            final_checkpoint: path,
        });
    }

    while trainer.step_count() < train_config.max_steps {
        let step = trainer.step_count();
        let indices = batch_for_step(examples.len(), train_config.batch_size, train_config.seed, step);
        let batch: Vec<&AnonymizedExample> = indices.iter().map(|&i| &examples[i]).collect();
        let losses = match trainer.train_step(vocab, &batch) {
            Ok(l) => l,
            Err(CoreError::NonFiniteLoss { step, detail }) => {
                let dump = checkpoint_dir.join(format!("bad_batch_step_{step}.json"));
                let payload = serde_json::json!({
                    "step": step,
                    "detail": detail,
                    "example_indices": indices,
                });
                std::fs::write(&dump, serde_json::to_string_pretty(&payload)?)?;
                return Err(CoreError::NonFiniteLoss {
                    step,
                    detail: format!("{detail}; offending batch dumped to {}", dump.display()),
                });
            }
            Err(e) => return Err(e),
        };
        let record = LossRecord {
            step: trainer.step_count(),
            lm: losses.lm,
            ent: losses.ent,
            cl: losses.cl,
            total: losses.total,
        };
        writeln!(log_file, "{}", serde_json::to_string(&record)?)?;
        records.push(record);

        let done = trainer.step_count() >= train_config.max_steps;
        if done || trainer.step_count() % train_config.checkpoint_every.max(1) == 0 {
            trainer.save(&checkpoint_path(checkpoint_dir, trainer.step_count()))?;
        }
    }
    log_file.flush()?;

    let final_path = checkpoint_path(checkpoint_dir, trainer.step_count());
    if !final_path.exists() {
        trainer.save(&final_path)?;
    }
    Ok(TrainSummary {
        steps_run: trainer.step_count() - steps_before,
        final_step: trainer.step_count(),
        records,
        final_checkpoint: final_path,
    })
}
