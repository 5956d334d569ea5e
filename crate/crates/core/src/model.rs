//! The assembled audio-visual LM: frozen encoders, trainable projectors,
//! decoder with adapters, plus checkpoint save/load and adapter merging.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioEncoder, AudioEncoderConfig, AudioError, MelConfig};
use crate::checkpoint::{self, CheckpointError, StoredTensor, TensorMap};
use crate::lm::{
    assemble_sequence, AssembleOptions, DecoderLm, LmConfig, LmError, MultimodalSequence, Projector,
};
use crate::optim::Parameter;
use crate::rng::ComponentRng;
use crate::tensor::TensorError;
use crate::tokenizer;
use crate::vision::{self, VisionEncoder, VisionEncoderConfig, VisionError};
use crate::TokenMatrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("config sidecar: {0}")]
    Config(#[from] serde_json::Error),
    #[error("io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint missing tensor {name}")]
    MissingTensor { name: String },
    #[error("checkpoint has unknown tensor {name}")]
    UnknownTensor { name: String },
    #[error("tensor {name} has dims {got:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("adapter tensor {name} does not address a base attention weight")]
    AdapterName { name: String },
}

/// Everything needed to rebuild the model deterministically. Saved verbatim
/// next to each checkpoint so a weights file is self-describing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AvlmConfig {
    pub seed: u64,
    pub mel: MelConfig,
    pub audio: AudioEncoderConfig,
    pub vision: VisionEncoderConfig,
    pub lm: LmConfig,
    /// Hidden width of both projectors; 0 means "use the LM width".
    pub proj_hidden: usize,
}

impl Default for AvlmConfig {
    /// Desk-scale preset: runs the full pipeline on fixture media in seconds.
    /// The per-module defaults keep the reference topology dims; this preset
    /// deliberately shrinks them so an unconfigured run stays cheap.
    fn default() -> Self {
        AvlmConfig {
            seed: 0,
            mel: MelConfig::default(),
            audio: AudioEncoderConfig {
                n_mels: 80,
                d_model: 32,
                n_layers: 1,
                n_heads: 2,
                budget: 16,
            },
            vision: VisionEncoderConfig {
                image_size: 32,
                patch: 8,
                d_model: 32,
                n_layers: 1,
                n_heads: 2,
                n_frames: 4,
                use_positions: true,
            },
            lm: LmConfig {
                vocab: tokenizer::VOCAB_SIZE,
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                max_seq: 256,
                lora_rank: 8,
                lora_alpha: 16.0,
            },
            proj_hidden: 0,
        }
    }
}

impl AvlmConfig {
    pub fn proj_hidden_width(&self) -> usize {
        if self.proj_hidden == 0 {
            self.lm.d_model
        } else {
            self.proj_hidden
        }
    }
}

pub struct Model {
    pub cfg: AvlmConfig,
    pub audio_enc: AudioEncoder,
    pub vision_enc: VisionEncoder,
    pub audio_proj: Projector,
    pub vision_proj: Projector,
    pub lm: DecoderLm,
}

/// Media inputs plus tokenized text for one sample, ready to assemble.
pub struct PreparedSample {
    pub audio: Option<TokenMatrix>,
    pub video: Option<TokenMatrix>,
    pub prompt_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
}

impl Model {
    /// Deterministic init: each component draws from its own seeded stream,
    /// so adding layers to one component never shifts another's weights.
    pub fn init(cfg: AvlmConfig) -> Self {
        let mut audio_rng = ComponentRng::for_component(cfg.seed, "audio");
        let mut vision_rng = ComponentRng::for_component(cfg.seed, "vision");
        let mut lm_rng = ComponentRng::for_component(cfg.seed, "lm");
        let mut lora_rng = ComponentRng::for_component(cfg.seed, "lora");
        let mut pa_rng = ComponentRng::for_component(cfg.seed, "proj.audio");
        let mut pv_rng = ComponentRng::for_component(cfg.seed, "proj.vision");
        let hidden = cfg.proj_hidden_width();
        Model {
            audio_enc: AudioEncoder::init(cfg.audio, &mut audio_rng),
            vision_enc: VisionEncoder::init(cfg.vision, &mut vision_rng),
            audio_proj: Projector::init("proj.audio", cfg.audio.d_model, hidden, cfg.lm.d_model, &mut pa_rng),
            vision_proj: Projector::init("proj.vision", cfg.vision.d_model, hidden, cfg.lm.d_model, &mut pv_rng),
            lm: DecoderLm::init(cfg.lm, &mut lm_rng, &mut lora_rng),
            cfg,
        }
    }

    /// Every tensor in the model, adapters included, under its stable name.
    pub fn named_parameters(&self) -> Vec<Parameter> {
        let mut out = self.audio_enc.named_parameters();
        out.extend(self.vision_enc.named_parameters());
        out.extend(self.audio_proj.named_parameters());
        out.extend(self.vision_proj.named_parameters());
        out.extend(self.lm.named_parameters());
        out.extend(self.lm.adapter_parameters());
        out
    }

    fn to_maps(&self) -> (TensorMap, TensorMap) {
        let mut base = TensorMap::new();
        let mut adapters = TensorMap::new();
        for p in self.named_parameters() {
            let stored = StoredTensor {
                dims: p.tensor.shape(),
                values: p.tensor.data(),
            };
            if p.name.starts_with("lora.") {
                adapters.insert(p.name, stored);
            } else {
                base.insert(p.name, stored);
            }
        }
        (base, adapters)
    }

    /// Base checkpoint map only (no adapters), as written to disk.
    pub fn base_map(&self) -> TensorMap {
        self.to_maps().0
    }

    pub fn adapter_map(&self) -> TensorMap {
        self.to_maps().1
    }

    /// Write `<path>` (base weights), `<stem>.lora.avlm` (adapters) and
    /// `<path>.json` (config sidecar).
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let (base, adapters) = self.to_maps();
        checkpoint::save(path, &base)?;
        checkpoint::save(&adapter_path(path), &adapters)?;
        let json = serde_json::to_string_pretty(&self.cfg)?;
        let sidecar = sidecar_path(path);
        fs::write(&sidecar, json).map_err(|source| ModelError::Io {
            path: sidecar.clone(),
            source,
        })?;
        Ok(())
    }

    /// Rebuild from `<path>` plus its sidecar. A missing adapter file is
    /// fine: fresh adapters are zero-initialized and therefore inert.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let sidecar = sidecar_path(path);
        let raw = fs::read_to_string(&sidecar).map_err(|source| ModelError::Io {
            path: sidecar.clone(),
            source,
        })?;
        let cfg: AvlmConfig = serde_json::from_str(&raw)?;
        let mut model = Model::init(cfg);
        let base = checkpoint::load(path)?;
        model.apply_map(&base, false)?;
        let apath = adapter_path(path);
        if apath.exists() {
            let adapters = checkpoint::load(&apath)?;
            model.apply_map(&adapters, true)?;
        }
        Ok(model)
    }

    /// Copy stored values into the live tensors. Strict: every stored name
    /// must match a parameter and vice versa within the addressed family.
    pub fn apply_map(&mut self, map: &TensorMap, adapters_only: bool) -> Result<(), ModelError> {
        let params = self.named_parameters();
        let mut seen: HashSet<&str> = HashSet::new();
        for p in &params {
            if p.name.starts_with("lora.") != adapters_only {
                continue;
            }
            let stored = map.get(&p.name).ok_or_else(|| ModelError::MissingTensor {
                name: p.name.clone(),
            })?;
            if stored.dims != p.tensor.shape() {
                return Err(ModelError::TensorShape {
                    name: p.name.clone(),
                    expected: p.tensor.shape(),
                    got: stored.dims.clone(),
                });
            }
            p.tensor.set_data(&stored.values);
            seen.insert(p.name.as_str());
        }
        for name in map.keys() {
            if !seen.contains(name.as_str()) {
                return Err(ModelError::UnknownTensor { name: name.clone() });
            }
        }
        Ok(())
    }

    pub fn encode_audio_file(&self, path: &Path) -> Result<TokenMatrix, ModelError> {
        let wave = audio::load_wav(path)?;
        let mel = audio::log_mel(&wave, &self.cfg.mel);
        let hidden = self.audio_enc.encode(&mel)?;
        Ok(audio::pool_to_budget(&hidden, self.cfg.audio.budget))
    }

    pub fn encode_video_dir(&self, dir: &Path) -> Result<TokenMatrix, ModelError> {
        let clip = vision::load_frame_dir(dir)?;
        let sampled = vision::sample_frames(&clip, self.cfg.vision.n_frames);
        let grid = self.vision_enc.encode_clip(&sampled)?;
        Ok(vision::pool_spatiotemporal(&grid))
    }

    pub fn prepare(
        &self,
        audio_path: Option<&Path>,
        frames_dir: Option<&Path>,
        question: &str,
        answer: Option<&str>,
    ) -> Result<PreparedSample, ModelError> {
        Ok(PreparedSample {
            audio: audio_path.map(|p| self.encode_audio_file(p)).transpose()?,
            video: frames_dir.map(|p| self.encode_video_dir(p)).transpose()?,
            prompt_ids: tokenizer::encode(question, true, false),
            answer_ids: answer.map_or_else(Vec::new, |a| tokenizer::encode(a, false, true)),
        })
    }

    pub fn assemble(&self, sample: &PreparedSample, zero_audio: bool) -> Result<MultimodalSequence, ModelError> {
        Ok(assemble_sequence(
            sample.audio.as_ref(),
            sample.video.as_ref(),
            &sample.prompt_ids,
            &sample.answer_ids,
            &self.audio_proj,
            &self.vision_proj,
            &self.lm,
            AssembleOptions { zero_audio },
        )?)
    }

    /// Training loss for one sample (answer span supervised).
    pub fn sample_loss(&self, sample: &PreparedSample, use_adapters: bool) -> Result<crate::tensor::Tensor, ModelError> {
        let seq = self.assemble(sample, false)?;
        Ok(self.lm.loss(&seq, use_adapters)?)
    }

    /// Greedy answer text for a sample; the answer field is ignored.
    pub fn answer(
        &self,
        sample: &PreparedSample,
        use_adapters: bool,
        max_new: usize,
        zero_audio: bool,
    ) -> Result<String, ModelError> {
        let prefix = assemble_sequence(
            sample.audio.as_ref(),
            sample.video.as_ref(),
            &sample.prompt_ids,
            &[],
            &self.audio_proj,
            &self.vision_proj,
            &self.lm,
            AssembleOptions { zero_audio },
        )?;
        let ids = self.lm.generate(&prefix, use_adapters, max_new)?;
        Ok(tokenizer::decode(&ids))
    }
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut os = ckpt.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

pub fn adapter_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().unwrap_or_default().to_string_lossy();
    ckpt.with_file_name(format!("{stem}.lora.avlm"))
}

/// Fold adapter pairs into their base weights: W <- W + (alpha/rank) B A.
/// Returns the list of base names rewritten, sorted.
pub fn merge_adapters(
    base: &mut TensorMap,
    adapters: &TensorMap,
    alpha: f32,
    rank: usize,
) -> Result<Vec<String>, ModelError> {
    let scale = alpha / rank as f32;
    let mut merged = Vec::new();
    for name in adapters.keys() {
        let Some(pair_base) = name.strip_suffix(".a") else {
            if name.strip_suffix(".b").is_none() {
                return Err(ModelError::AdapterName { name: name.clone() });
            }
            continue;
        };
        let b_name = format!("{pair_base}.b");
        let a = adapters.get(name).expect("keyed iteration");
        let b = adapters.get(&b_name).ok_or_else(|| ModelError::MissingTensor {
            name: b_name.clone(),
        })?;
        let target = pair_base
            .strip_prefix("lora.")
            .map(|rest| format!("lm.{rest}"))
            .ok_or_else(|| ModelError::AdapterName { name: name.clone() })?;
        let w = base.get_mut(&target).ok_or_else(|| ModelError::MissingTensor {
            name: target.clone(),
        })?;
        let (r, d_out) = (a.dims[0], a.dims[1]);
        let d_in = b.dims[0];
        if b.dims[1] != r || w.dims != vec![d_in, d_out] {
            return Err(ModelError::TensorShape {
                name: target.clone(),
                expected: vec![d_in, d_out],
                got: w.dims.clone(),
            });
        }
        for i in 0..d_in {
            for j in 0..d_out {
                let mut acc = 0.0f32;
                for t in 0..r {
                    acc += b.values[i * r + t] * a.values[t * d_out + j];
                }
                w.values[i * d_out + j] += scale * acc;
            }
        }
        merged.push(target);
    }
    merged.sort();
    Ok(merged)
}
