//! Stage-based training: which parameters move per stage, the gradient
//! accumulation loop, and per-step reporting.
//!
//! Gradients accumulate per sample in data order with the loss pre-scaled by
//! 1/batch, so any micro-batch split of the same global batch produces
//! bit-identical updates.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint;
use crate::data::{DataError, InstructionSample};
use crate::lm::LmError;
use crate::model::{AvlmConfig, Model, ModelError, PreparedSample};
use crate::optim::{lr_at, zero_grads, AdamW, AdamWConfig};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("numeric abort at step {step}, sample {sample}: loss is not finite")]
    NumericAbort { step: usize, sample: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageId {
    PretrainAudio,
    PretrainVision,
    FinetuneAv,
    FinetuneVisionOnly,
}

pub const STAGE_NAMES: [&str; 4] = [
    "pretrain_audio",
    "pretrain_vision",
    "finetune_av",
    "finetune_vision_only",
];

impl StageId {
    pub fn parse(s: &str) -> Result<Self, TrainError> {
        match s {
            "pretrain_audio" => Ok(StageId::PretrainAudio),
            "pretrain_vision" => Ok(StageId::PretrainVision),
            "finetune_av" => Ok(StageId::FinetuneAv),
            "finetune_vision_only" => Ok(StageId::FinetuneVisionOnly),
            other => Err(TrainError::Config(format!(
                "unknown stage {other:?}, expected one of {STAGE_NAMES:?}"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageId::PretrainAudio => "pretrain_audio",
            StageId::PretrainVision => "pretrain_vision",
            StageId::FinetuneAv => "finetune_av",
            StageId::FinetuneVisionOnly => "finetune_vision_only",
        }
    }

    /// Projector pretraining runs hotter than adapter finetuning.
    pub fn default_lr(self) -> f32 {
        match self {
            StageId::PretrainAudio | StageId::PretrainVision => 1e-3,
            StageId::FinetuneAv | StageId::FinetuneVisionOnly => 2e-4,
        }
    }
}

/// Resolved view of one stage: name-prefix partition into trainable and
/// frozen, which modality spans get populated, and the loop knobs.
pub struct StagePlan {
    pub stage: StageId,
    pub trainable: &'static [&'static str],
    pub frozen: &'static [&'static str],
    pub use_audio: bool,
    pub use_video: bool,
    pub epochs: usize,
    pub lr: f32,
    pub global_batch: usize,
    pub micro_batch: usize,
    pub seed: u64,
}

pub fn plan_stage(stage: StageId, cfg: &TrainConfig) -> StagePlan {
    let (trainable, frozen, use_audio, use_video): (&[&str], &[&str], bool, bool) = match stage {
        StageId::PretrainAudio => (
            &["proj.audio."],
            &["audio.", "vision.", "proj.vision.", "lm.", "lora."],
            true,
            false,
        ),
        StageId::PretrainVision => (
            &["proj.vision."],
            &["audio.", "vision.", "proj.audio.", "lm.", "lora."],
            false,
            true,
        ),
        StageId::FinetuneAv => (
            &["lora.", "proj.audio.", "proj.vision."],
            &["audio.", "vision.", "lm."],
            true,
            true,
        ),
        StageId::FinetuneVisionOnly => (
            &["lora.", "proj.vision."],
            &["audio.", "vision.", "proj.audio.", "lm."],
            false,
            true,
        ),
    };
    StagePlan {
        stage,
        trainable,
        frozen,
        use_audio,
        use_video,
        epochs: cfg.epochs,
        lr: cfg.lr.unwrap_or_else(|| stage.default_lr()),
        global_batch: cfg.global_batch,
        micro_batch: cfg.micro_batch,
        seed: cfg.seed,
    }
}

impl StagePlan {
    /// Some(true) = trainable, Some(false) = frozen, None = not covered or
    /// covered twice (either would be a naming-scheme bug).
    pub fn classify(&self, name: &str) -> Option<bool> {
        let t = self.trainable.iter().any(|p| name.starts_with(p));
        let f = self.frozen.iter().any(|p| name.starts_with(p));
        match (t, f) {
            (true, false) => Some(true),
            (false, true) => Some(false),
            _ => None,
        }
    }
}

/// Everything `avx train` reads. Sparse files work: every key has a default.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: String,
    /// None picks the stage default (1e-3 pretrain, 2e-4 finetune).
    pub lr: Option<f32>,
    pub epochs: usize,
    pub global_batch: usize,
    pub micro_batch: usize,
    pub seed: u64,
    /// Warmup steps = ceil(warmup_frac * total steps).
    pub warmup_frac: f32,
    pub weight_decay: f32,
    /// JSONL dataset; media paths inside are relative to its directory.
    pub data: PathBuf,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: PathBuf,
    /// Where step records go as JSON lines; None means stdout.
    pub report: Option<PathBuf>,
    pub model: AvlmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: "finetune_av".into(),
            lr: None,
            epochs: 1,
            global_batch: 4,
            micro_batch: 1,
            seed: 0,
            warmup_frac: 0.03,
            weight_decay: 0.0,
            data: PathBuf::from("data.jsonl"),
            checkpoint_in: None,
            checkpoint_out: PathBuf::from("model.avlm"),
            report: None,
            model: AvlmConfig::default(),
        }
    }
}

/// One optimizer step as reported to the JSONL stream.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    pub timestamp: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub stage: String,
    pub steps: usize,
    pub losses: Vec<f32>,
    pub updated_params: usize,
    pub frozen_params: usize,
    pub wall_seconds: f64,
    pub final_checksum: String,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        .as_secs_f64()
}

/// Digest over every tensor in the model, adapters included; two models with
/// the same bytes share this string.
pub fn model_checksum(model: &Model) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.base_map().iter().chain(model.adapter_map().iter()) {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(checkpoint::tensor_checksum(t).as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Run one training stage over `samples` in file order (one pass per epoch,
/// no shuffling: determinism is part of the contract). Media are encoded
/// once per sample and cached; stage span gating decides whether audio or
/// frames are read at all.
pub fn run_stage(
    model: &Model,
    samples: &[InstructionSample],
    data_root: &Path,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport, TrainError> {
    let plan = plan_stage(StageId::parse(&cfg.stage)?, cfg);
    if samples.is_empty() {
        return Err(TrainError::Config("training data is empty".into()));
    }
    if cfg.epochs == 0 {
        return Err(TrainError::Config("epochs must be at least 1".into()));
    }
    if cfg.global_batch == 0 || cfg.micro_batch == 0 {
        return Err(TrainError::Config("batch sizes must be at least 1".into()));
    }
    if cfg.global_batch % cfg.micro_batch != 0 {
        return Err(TrainError::Config(format!(
            "global_batch {} is not divisible by micro_batch {}",
            cfg.global_batch, cfg.micro_batch
        )));
    }
    for s in samples {
        if s.answer.as_deref().map_or(true, str::is_empty) {
            return Err(TrainError::Data(DataError::MissingAnswer { id: s.id.clone() }));
        }
    }

    let mut params = model.named_parameters();
    let mut updated_params = 0usize;
    let mut frozen_params = 0usize;
    for p in &mut params {
        match plan.classify(&p.name) {
            Some(true) => {
                p.trainable = true;
                updated_params += 1;
            }
            Some(false) => {
                p.trainable = false;
                frozen_params += 1;
            }
            None => {
                return Err(TrainError::Config(format!(
                    "parameter {} is not covered by the {} stage patterns",
                    p.name,
                    plan.stage.name()
                )));
            }
        }
    }

    let total_examples = samples.len() * cfg.epochs;
    let steps_total = total_examples.div_ceil(cfg.global_batch);
    let warmup = (f64::from(cfg.warmup_frac) * steps_total as f64).ceil() as usize;

    let mut opt = AdamW::new(AdamWConfig {
        lr: plan.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut cache: HashMap<usize, PreparedSample> = HashMap::new();
    let started = Instant::now();
    let mut losses = Vec::with_capacity(steps_total);

    let schedule: Vec<usize> = (0..cfg.epochs).flat_map(|_| 0..samples.len()).collect();
    let mut step = 0usize;
    for chunk in schedule.chunks(cfg.global_batch) {
        let lr = lr_at(plan.lr, step, steps_total, warmup);
        zero_grads(&params);
        let inv = 1.0 / chunk.len() as f32;
        let mut loss_sum = 0.0f32;
        for micro in chunk.chunks(cfg.micro_batch) {
            for &i in micro {
                if !cache.contains_key(&i) {
                    let s = &samples[i];
                    let audio = if plan.use_audio { s.audio_path(data_root) } else { None };
                    let frames = if plan.use_video { s.frames_path(data_root) } else { None };
                    let prep = model.prepare(
                        audio.as_deref(),
                        frames.as_deref(),
                        &s.question,
                        s.answer.as_deref(),
                    )?;
                    cache.insert(i, prep);
                }
            }
            // forwards for the whole micro-batch, then backwards in order
            let mut pending = Vec::with_capacity(micro.len());
            for &i in micro {
                let seq = model.assemble(&cache[&i], false)?;
                let loss = model.lm.loss(&seq, true)?;
                pending.push((loss, i));
            }
            for (loss, i) in pending {
                let v = loss.item();
                if !v.is_finite() {
                    return Err(TrainError::NumericAbort {
                        step: step + 1,
                        sample: samples[i].id.clone(),
                    });
                }
                loss_sum += v;
                loss.scale(inv).backward()?;
            }
        }
        opt.step(&params, lr)?;
        step += 1;
        let mean = loss_sum * inv;
        losses.push(mean);
        on_step(&StepRecord {
            step,
            loss: mean,
            lr,
            timestamp: unix_now(),
        });
    }

    Ok(TrainReport {
        stage: plan.stage.name().into(),
        steps: step,
        losses,
        updated_params,
        frozen_params,
        wall_seconds: started.elapsed().as_secs_f64(),
        final_checksum: model_checksum(model),
    })
}

/// Names whose stored bytes differ between two snapshots of the same model.
pub fn changed_names(before: &checkpoint::TensorMap, after: &checkpoint::TensorMap) -> Vec<String> {
    checkpoint::diff_names(before, after)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{AudioEncoderConfig, MelConfig};
    use crate::data;
    use crate::lm::LmConfig;
    use crate::tokenizer;
    use crate::vision::VisionEncoderConfig;
    use std::collections::BTreeMap;
    use tempfile::tempdir;

    fn tiny_model_config(seed: u64) -> AvlmConfig {
        AvlmConfig {
            seed,
            mel: MelConfig {
                target_seconds: 1.0,
                ..MelConfig::default()
            },
            audio: AudioEncoderConfig {
                n_mels: 80,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                budget: 4,
            },
            vision: VisionEncoderConfig {
                image_size: 32,
                patch: 8,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                n_frames: 2,
                use_positions: true,
            },
            lm: LmConfig {
                vocab: tokenizer::VOCAB_SIZE,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                max_seq: 128,
                lora_rank: 2,
                lora_alpha: 4.0,
            },
            proj_hidden: 0,
        }
    }

    fn text_sample(id: &str, q: &str, a: &str) -> InstructionSample {
        InstructionSample {
            id: id.into(),
            audio: None,
            frames: None,
            question: q.into(),
            answer: Some(a.into()),
            paired_question: None,
            extras: BTreeMap::new(),
        }
    }

    fn base_cfg(stage: &str, seed: u64) -> TrainConfig {
        TrainConfig {
            stage: stage.into(),
            seed,
            model: tiny_model_config(seed),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn every_stage_partitions_all_parameters() {
        let model = Model::init(tiny_model_config(1));
        let cfg = base_cfg("finetune_av", 1);
        for stage in [
            StageId::PretrainAudio,
            StageId::PretrainVision,
            StageId::FinetuneAv,
            StageId::FinetuneVisionOnly,
        ] {
            let plan = plan_stage(stage, &cfg);
            for p in model.named_parameters() {
                assert!(
                    plan.classify(&p.name).is_some(),
                    "{} uncovered in {}",
                    p.name,
                    stage.name()
                );
            }
        }
    }

    #[test]
    fn stage_trainable_sets_follow_the_regime() {
        let cfg = base_cfg("x", 1);
        let p1 = plan_stage(StageId::PretrainAudio, &cfg);
        assert_eq!(p1.classify("proj.audio.w1"), Some(true));
        assert_eq!(p1.classify("lm.wte"), Some(false));
        assert_eq!(p1.classify("lora.blocks.0.attn.wq.a"), Some(false));
        let p2 = plan_stage(StageId::FinetuneAv, &cfg);
        assert_eq!(p2.classify("proj.vision.w2"), Some(true));
        assert_eq!(p2.classify("lora.blocks.0.attn.wv.b"), Some(true));
        assert_eq!(p2.classify("audio.conv.w"), Some(false));
        let p3 = plan_stage(StageId::FinetuneVisionOnly, &cfg);
        assert_eq!(p3.classify("proj.audio.w1"), Some(false));
        assert_eq!(p3.classify("proj.vision.w1"), Some(true));
        assert!(!p3.use_audio && p3.use_video);
    }

    #[test]
    fn unknown_stage_is_config_error() {
        let err = StageId::parse("warmup_everything").unwrap_err();
        assert!(err.to_string().contains("finetune_av"), "{err}");
    }

    #[test]
    fn batch_divisibility_is_enforced() {
        let model = Model::init(tiny_model_config(2));
        let mut cfg = base_cfg("finetune_av", 2);
        cfg.global_batch = 4;
        cfg.micro_batch = 3;
        let samples = vec![text_sample("a", "q?", "a.")];
        let err = run_stage(&model, &samples, Path::new("."), &cfg, |_| {}).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn empty_data_is_rejected() {
        let model = Model::init(tiny_model_config(2));
        let cfg = base_cfg("finetune_av", 2);
        let err = run_stage(&model, &[], Path::new("."), &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
    }

    #[test]
    fn missing_answer_is_rejected() {
        let model = Model::init(tiny_model_config(2));
        let cfg = base_cfg("finetune_av", 2);
        let mut s = text_sample("a", "q?", "x");
        s.answer = None;
        let err = run_stage(&model, &[s], Path::new("."), &cfg, |_| {}).unwrap_err();
        assert!(err.to_string().contains("answer"), "{err}");
    }

    #[test]
    fn loss_falls_on_tiny_memorization_task() {
        // Media samples, not text-only: the finetune stage trains adapters
        // and projectors, and the projector path is where most of the fitting
        // capacity lives when the base is frozen.
        let dir = tempfile::tempdir().unwrap();
        let samples = data::make_fixtures(dir.path(), 2, 9, 0.5).unwrap().samples;
        let mut mc = tiny_model_config(3);
        mc.lm.d_model = 32;
        mc.lm.lora_rank = 4;
        let model = Model::init(mc);
        let mut cfg = base_cfg("finetune_av", 3);
        cfg.epochs = 150;
        cfg.global_batch = 2;
        cfg.lr = Some(2e-2);
        let report = run_stage(&model, &samples, dir.path(), &cfg, |_| {}).unwrap();
        assert_eq!(report.steps, 150);
        let first = report.losses[0];
        let last = *report.losses.last().unwrap();
        assert!(last < first * 0.5, "first {first}, last {last}");
    }

    #[test]
    fn same_seed_gives_identical_loss_series() {
        let samples = vec![
            text_sample("a", "one?", "1."),
            text_sample("b", "two?", "2."),
            text_sample("c", "three?", "3."),
        ];
        let run = || {
            let model = Model::init(tiny_model_config(5));
            let mut cfg = base_cfg("finetune_av", 5);
            cfg.epochs = 6;
            cfg.global_batch = 3;
            run_stage(&model, &samples, Path::new("."), &cfg, |_| {})
                .unwrap()
                .losses
                .iter()
                .map(|l| l.to_bits())
                .collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn micro_batch_split_is_bit_identical() {
        let samples = vec![
            text_sample("a", "alpha?", "a."),
            text_sample("b", "beta?", "b."),
            text_sample("c", "gamma?", "c."),
            text_sample("d", "delta?", "d."),
        ];
        let run = |micro: usize| {
            let model = Model::init(tiny_model_config(6));
            let mut cfg = base_cfg("finetune_av", 6);
            cfg.epochs = 2;
            cfg.global_batch = 4;
            cfg.micro_batch = micro;
            let report = run_stage(&model, &samples, Path::new("."), &cfg, |_| {}).unwrap();
            (report.final_checksum, report.losses)
        };
        let (c1, l1) = run(1);
        let (c4, l4) = run(4);
        assert_eq!(c1, c4);
        assert_eq!(
            l1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            l4.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn pretrain_audio_changes_only_audio_projector() {
        let dir = tempdir().unwrap();
        let set = data::make_fixtures(dir.path(), 2, 4, 1.0).unwrap();
        let model = Model::init(tiny_model_config(7));
        let before = model.base_map();
        let before_adapters = model.adapter_map();
        let mut cfg = base_cfg("pretrain_audio", 7);
        cfg.epochs = 2;
        cfg.global_batch = 2;
        run_stage(&model, &set.samples, dir.path(), &cfg, |_| {}).unwrap();
        let changed = changed_names(&before, &model.base_map());
        assert!(!changed.is_empty(), "projector should move");
        assert!(
            changed.iter().all(|n| n.starts_with("proj.audio.")),
            "{changed:?}"
        );
        let adapter_changed = changed_names(&before_adapters, &model.adapter_map());
        assert!(adapter_changed.is_empty(), "{adapter_changed:?}");
    }

    #[test]
    fn vision_only_stage_never_touches_audio_media() {
        let dir = tempdir().unwrap();
        let set = data::make_fixtures(dir.path(), 2, 4, 0.0).unwrap();
        // break every wav so an attempted read would fail loudly
        for s in &set.samples {
            let p = dir.path().join(s.audio.as_ref().unwrap());
            std::fs::write(&p, b"not a wav").unwrap();
        }
        let model = Model::init(tiny_model_config(8));
        let mut cfg = base_cfg("finetune_vision_only", 8);
        cfg.epochs = 1;
        cfg.global_batch = 2;
        let report = run_stage(&model, &set.samples, dir.path(), &cfg, |_| {}).unwrap();
        assert_eq!(report.steps, 1);
    }

    #[test]
    fn nan_loss_aborts_with_step_and_sample() {
        let model = Model::init(tiny_model_config(9));
        for p in model.named_parameters() {
            if p.name == "lm.wte" {
                let n = p.tensor.numel();
                p.tensor.set_data(&vec![f32::NAN; n]);
            }
        }
        let cfg = base_cfg("finetune_av", 9);
        let samples = vec![text_sample("poisoned", "q?", "a.")];
        let err = run_stage(&model, &samples, Path::new("."), &cfg, |_| {}).unwrap_err();
        match err {
            TrainError::NumericAbort { step, sample } => {
                assert_eq!(step, 1);
                assert_eq!(sample, "poisoned");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn step_records_follow_the_schedule() {
        let model = Model::init(tiny_model_config(10));
        let mut cfg = base_cfg("finetune_av", 10);
        cfg.epochs = 10;
        cfg.global_batch = 1;
        cfg.lr = Some(0.01);
        let samples = vec![text_sample("a", "q?", "a.")];
        let mut records = Vec::new();
        run_stage(&model, &samples, Path::new("."), &cfg, |r| records.push(*r)).unwrap();
        assert_eq!(records.len(), 10);
        let warmup = (0.03f64 * 10.0).ceil() as usize;
        for (k, r) in records.iter().enumerate() {
            assert_eq!(r.step, k + 1);
            assert_eq!(r.lr, lr_at(0.01, k, 10, warmup));
            assert!(r.loss.is_finite());
        }
    }

    #[test]
    fn frozen_parameters_are_bit_identical_after_stage() {
        let model = Model::init(tiny_model_config(11));
        let before = model.base_map();
        let mut cfg = base_cfg("finetune_av", 11);
        cfg.epochs = 3;
        cfg.global_batch = 1;
        let samples = vec![text_sample("a", "q?", "a.")];
        run_stage(&model, &samples, Path::new("."), &cfg, |_| {}).unwrap();
        let after = model.base_map();
        for (name, t) in &before {
            if name.starts_with("proj.") {
                continue;
            }
            assert_eq!(
                checkpoint::tensor_checksum(t),
                checkpoint::tensor_checksum(&after[name]),
                "{name} moved"
            );
        }
    }
}
