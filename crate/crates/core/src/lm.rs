//! Fusion language model: modality projectors, multimodal sequence assembly,
//! and a causal decoder with optional low-rank adapters on attention q/v.
//!
//! This is the differentiable half of the system. The frozen encoders hand
//! over plain token matrices; everything from the projectors onward runs on
//! the gradient tape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::Parameter;
use crate::rng::ComponentRng;
use crate::tensor::{concat_cols, concat_rows, AttnMask, Tensor, TensorError};
use crate::tokenizer::{self, EOS, PAD};
use crate::TokenMatrix;

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum LmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("projector expects input dim {expected}, got {got}")]
    ProjectorDim { expected: usize, got: usize },
    #[error(
        "sequence audio {audio} + video {video} + text {text} = {total} exceeds max positions {max}"
    )]
    LengthOverflow {
        audio: usize,
        video: usize,
        text: usize,
        total: usize,
        max: usize,
    },
    #[error("answer tokens need at least one preceding position to predict from")]
    AnswerWithoutPrefix,
    #[error("no supervised positions in sequence")]
    NoSupervision,
}

// -------------------------------------------------------------------
// Projector
// -------------------------------------------------------------------

/// Two-layer GELU projector from an encoder space into the LM embedding
/// space: gelu(x W1 + b1) W2 + b2. Exactly two layers.
pub struct Projector {
    prefix: String,
    pub d_in: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Projector {
    pub fn init(prefix: &str, d_in: usize, d_hidden: usize, d_lm: usize, rng: &mut ComponentRng) -> Self {
        Projector {
            prefix: prefix.to_string(),
            d_in,
            w1: Tensor::with_grad(&[d_in, d_hidden], rng.normal(d_in * d_hidden, 1.0 / (d_in as f32).sqrt())),
            b1: Tensor::with_grad(&[d_hidden], vec![0.0; d_hidden]),
            w2: Tensor::with_grad(&[d_hidden, d_lm], rng.normal(d_hidden * d_lm, 1.0 / (d_hidden as f32).sqrt())),
            b2: Tensor::with_grad(&[d_lm], vec![0.0; d_lm]),
        }
    }

    pub fn named_parameters(&self) -> Vec<Parameter> {
        vec![
            Parameter::new(format!("{}.w1", self.prefix), self.w1.clone()),
            Parameter::new(format!("{}.b1", self.prefix), self.b1.clone()),
            Parameter::new(format!("{}.w2", self.prefix), self.w2.clone()),
            Parameter::new(format!("{}.b2", self.prefix), self.b2.clone()),
        ]
    }

    pub fn project(&self, x: &Tensor) -> Result<Tensor, LmError> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(LmError::ProjectorDim {
                expected: self.d_in,
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        let h = x.matmul(&self.w1)?.add_row(&self.b1)?.gelu();
        Ok(h.matmul(&self.w2)?.add_row(&self.b2)?)
    }

    pub fn project_tokens(&self, tokens: &TokenMatrix) -> Result<Tensor, LmError> {
        let x = Tensor::new(&[tokens.rows, tokens.dim], tokens.values.clone());
        self.project(&x)
    }
}

// -------------------------------------------------------------------
// LoRA
// -------------------------------------------------------------------

/// Low-rank additive adapter for one base weight W[d_in x d_out]:
/// effective W' = W + (alpha/rank) * B A. B starts at zero, so a fresh
/// adapter leaves the base model bit-for-bit unchanged.
pub struct LoraPair {
    pub name: String,
    pub a: Tensor, // [rank x d_out]
    pub b: Tensor, // [d_in x rank]
    pub rank: usize,
    pub alpha: f32,
}

impl LoraPair {
    pub fn init(name: &str, d_in: usize, d_out: usize, rank: usize, alpha: f32, rng: &mut ComponentRng) -> Self {
        LoraPair {
            name: name.to_string(),
            a: Tensor::with_grad(&[rank, d_out], rng.normal(rank * d_out, 0.02)),
            b: Tensor::with_grad(&[d_in, rank], vec![0.0; d_in * rank]),
            rank,
            alpha,
        }
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    /// x[n x d_in] -> adapter contribution [n x d_out].
    pub fn contribution(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        Ok(x.matmul(&self.b)?.matmul(&self.a)?.scale(self.scale()))
    }

    pub fn named_parameters(&self) -> Vec<Parameter> {
        vec![
            Parameter::new(format!("{}.a", self.name), self.a.clone()),
            Parameter::new(format!("{}.b", self.name), self.b.clone()),
        ]
    }
}

// -------------------------------------------------------------------
// Multimodal sequence
// -------------------------------------------------------------------

/// Assembled LM input: projected audio tokens, projected video tokens, then
/// embedded text, with next-token labels on the answer span only.
pub struct MultimodalSequence {
    pub embeddings: Tensor, // [len x d_lm]
    pub labels: Vec<Option<u32>>,
    pub audio_span: (usize, usize),
    pub video_span: (usize, usize),
    pub text_span: (usize, usize),
    /// Positions beyond this are PAD filler excluded from attention.
    pub valid_len: usize,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn supervised_positions(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AssembleOptions {
    /// Replace the projected audio span with zero embeddings (span length is
    /// preserved). Used by the no-audio ablation at inference.
    pub zero_audio: bool,
}

/// Build the fused sequence [audio][video][prompt][answer]. Labels are
/// next-token ids over the answer span: the position before each answer
/// token predicts it, so supervised-position count equals answer length.
/// Absent modalities contribute zero-length spans.
#[allow(clippy::too_many_arguments)]
pub fn assemble_sequence(
    audio: Option<&TokenMatrix>,
    video: Option<&TokenMatrix>,
    prompt_ids: &[u32],
    answer_ids: &[u32],
    audio_proj: &Projector,
    vision_proj: &Projector,
    lm: &DecoderLm,
    opts: AssembleOptions,
) -> Result<MultimodalSequence, LmError> {
    let a_len = audio.map_or(0, |t| t.rows);
    let v_len = video.map_or(0, |t| t.rows);
    let t_len = prompt_ids.len() + answer_ids.len();
    let total = a_len + v_len + t_len;
    if total > lm.cfg.max_seq {
        return Err(LmError::LengthOverflow {
            audio: a_len,
            video: v_len,
            text: t_len,
            total,
            max: lm.cfg.max_seq,
        });
    }
    if !answer_ids.is_empty() && a_len + v_len + prompt_ids.len() == 0 {
        return Err(LmError::AnswerWithoutPrefix);
    }

    let mut parts: Vec<Tensor> = Vec::new();
    if let Some(t) = audio {
        let projected = if opts.zero_audio {
            Tensor::zeros(&[t.rows, lm.cfg.d_model])
        } else {
            audio_proj.project_tokens(t)?
        };
        parts.push(projected);
    }
    if let Some(t) = video {
        parts.push(vision_proj.project_tokens(t)?);
    }
    let text_ids: Vec<u32> = prompt_ids.iter().chain(answer_ids).copied().collect();
    if !text_ids.is_empty() {
        parts.push(lm.wte.embed(&text_ids)?);
    }
    let embeddings = match parts.len() {
        0 => Tensor::zeros(&[0, lm.cfg.d_model]),
        1 => parts.remove(0),
        _ => {
            let refs: Vec<&Tensor> = parts.iter().collect();
            concat_rows(&refs)?
        }
    };

    let mut labels = vec![None; total];
    let answer_start = a_len + v_len + prompt_ids.len();
    for (i, &id) in answer_ids.iter().enumerate() {
        labels[answer_start - 1 + i] = Some(id);
    }

    Ok(MultimodalSequence {
        embeddings,
        labels,
        audio_span: (0, a_len),
        video_span: (a_len, a_len + v_len),
        text_span: (a_len + v_len, total),
        valid_len: total,
    })
}

/// Extend a sequence to `target_len` with PAD embeddings and IGNORE labels.
/// Padded keys are excluded from attention, so logits at valid positions are
/// bit-identical to the unpadded run.
pub fn pad_sequence(seq: &MultimodalSequence, target_len: usize, lm: &DecoderLm) -> Result<MultimodalSequence, LmError> {
    assert!(target_len >= seq.len());
    if target_len == seq.len() {
        return Ok(MultimodalSequence {
            embeddings: seq.embeddings.clone(),
            labels: seq.labels.clone(),
            audio_span: seq.audio_span,
            video_span: seq.video_span,
            text_span: seq.text_span,
            valid_len: seq.valid_len,
        });
    }
    if target_len > lm.cfg.max_seq {
        return Err(LmError::LengthOverflow {
            audio: seq.audio_span.1 - seq.audio_span.0,
            video: seq.video_span.1 - seq.video_span.0,
            text: target_len - seq.video_span.1,
            total: target_len,
            max: lm.cfg.max_seq,
        });
    }
    let pad_ids = vec![PAD; target_len - seq.len()];
    let pad_rows = lm.wte.embed(&pad_ids)?;
    let embeddings = concat_rows(&[&seq.embeddings, &pad_rows])?;
    let mut labels = seq.labels.clone();
    labels.resize(target_len, None);
    Ok(MultimodalSequence {
        embeddings,
        labels,
        audio_span: seq.audio_span,
        video_span: seq.video_span,
        text_span: seq.text_span,
        valid_len: seq.valid_len,
    })
}

// -------------------------------------------------------------------
// Decoder LM
// -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab: tokenizer::VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq: 1024,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

struct LmBlock {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    lora_q: LoraPair,
    lora_v: LoraPair,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Pre-norm causal decoder with learned absolute positions over the full
/// multimodal sequence. Adapters ride on the q and v projections.
pub struct DecoderLm {
    pub cfg: LmConfig,
    pub wte: Tensor, // [vocab x d]
    wpe: Tensor,     // [max_seq x d]
    blocks: Vec<LmBlock>,
    ln_f_g: Tensor,
    ln_f_b: Tensor,
    head_w: Tensor, // [d x vocab]
    head_b: Tensor,
}

impl DecoderLm {
    pub fn init(cfg: LmConfig, rng: &mut ComponentRng, lora_rng: &mut ComponentRng) -> Self {
        assert!(cfg.d_model % cfg.n_heads == 0, "d_model must divide into heads");
        let d = cfg.d_model;
        // Fan-in scaled init. The base never trains after init (adapters and
        // projectors do), so activations must sit at unit scale from the
        // start: a flat small sigma would cap the frozen readout's logit
        // range near sigma*d and no adapter could push past it.
        let s = 1.0 / (d as f32).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|i| LmBlock {
                ln1_g: Tensor::with_grad(&[d], vec![1.0; d]),
                ln1_b: Tensor::with_grad(&[d], vec![0.0; d]),
                wq: Tensor::with_grad(&[d, d], rng.normal(d * d, s)),
                bq: Tensor::with_grad(&[d], vec![0.0; d]),
                wk: Tensor::with_grad(&[d, d], rng.normal(d * d, s)),
                bk: Tensor::with_grad(&[d], vec![0.0; d]),
                wv: Tensor::with_grad(&[d, d], rng.normal(d * d, s)),
                bv: Tensor::with_grad(&[d], vec![0.0; d]),
                wo: Tensor::with_grad(&[d, d], rng.normal(d * d, s)),
                bo: Tensor::with_grad(&[d], vec![0.0; d]),
                lora_q: LoraPair::init(
                    &format!("lora.blocks.{i}.attn.wq"),
                    d,
                    d,
                    cfg.lora_rank,
                    cfg.lora_alpha,
                    lora_rng,
                ),
                lora_v: LoraPair::init(
                    &format!("lora.blocks.{i}.attn.wv"),
                    d,
                    d,
                    cfg.lora_rank,
                    cfg.lora_alpha,
                    lora_rng,
                ),
                ln2_g: Tensor::with_grad(&[d], vec![1.0; d]),
                ln2_b: Tensor::with_grad(&[d], vec![0.0; d]),
                w1: Tensor::with_grad(&[d, 4 * d], rng.normal(d * 4 * d, s)),
                b1: Tensor::with_grad(&[4 * d], vec![0.0; 4 * d]),
                w2: Tensor::with_grad(&[4 * d, d], rng.normal(4 * d * d, s * 0.5)),
                b2: Tensor::with_grad(&[d], vec![0.0; d]),
            })
            .collect();
        DecoderLm {
            wte: Tensor::with_grad(&[cfg.vocab, d], rng.normal(cfg.vocab * d, s)),
            wpe: Tensor::with_grad(&[cfg.max_seq, d], rng.normal(cfg.max_seq * d, s)),
            blocks,
            ln_f_g: Tensor::with_grad(&[d], vec![1.0; d]),
            ln_f_b: Tensor::with_grad(&[d], vec![0.0; d]),
            head_w: Tensor::with_grad(&[d, cfg.vocab], rng.normal(d * cfg.vocab, s)),
            head_b: Tensor::with_grad(&[cfg.vocab], vec![0.0; cfg.vocab]),
            cfg,
        }
    }

    /// Base LM parameters (lm.*); adapters are reported separately.
    pub fn named_parameters(&self) -> Vec<Parameter> {
        let mut out = vec![
            Parameter::new("lm.wte", self.wte.clone()),
            Parameter::new("lm.wpe", self.wpe.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |suffix: &str, t: &Tensor| Parameter::new(format!("lm.blocks.{i}.{suffix}"), t.clone());
            out.extend([
                p("ln1.g", &b.ln1_g),
                p("ln1.b", &b.ln1_b),
                p("attn.wq", &b.wq),
                p("attn.bq", &b.bq),
                p("attn.wk", &b.wk),
                p("attn.bk", &b.bk),
                p("attn.wv", &b.wv),
                p("attn.bv", &b.bv),
                p("attn.wo", &b.wo),
                p("attn.bo", &b.bo),
                p("ln2.g", &b.ln2_g),
                p("ln2.b", &b.ln2_b),
                p("mlp.w1", &b.w1),
                p("mlp.b1", &b.b1),
                p("mlp.w2", &b.w2),
                p("mlp.b2", &b.b2),
            ]);
        }
        out.push(Parameter::new("lm.ln_f.g", self.ln_f_g.clone()));
        out.push(Parameter::new("lm.ln_f.b", self.ln_f_b.clone()));
        out.push(Parameter::new("lm.head.w", self.head_w.clone()));
        out.push(Parameter::new("lm.head.b", self.head_b.clone()));
        out
    }

    pub fn adapter_parameters(&self) -> Vec<Parameter> {
        self.blocks
            .iter()
            .flat_map(|b| {
                let mut v = b.lora_q.named_parameters();
                v.extend(b.lora_v.named_parameters());
                v
            })
            .collect()
    }

    /// Full forward: [len x vocab] logits. `use_adapters` switches the LoRA
    /// contributions on q/v; off, the base model runs untouched.
    pub fn forward(&self, seq: &MultimodalSequence, use_adapters: bool) -> Result<Tensor, LmError> {
        let s = seq.len();
        if s > self.cfg.max_seq {
            return Err(LmError::LengthOverflow {
                audio: seq.audio_span.1 - seq.audio_span.0,
                video: seq.video_span.1 - seq.video_span.0,
                text: s - seq.video_span.1,
                total: s,
                max: self.cfg.max_seq,
            });
        }
        if s == 0 {
            return Ok(Tensor::zeros(&[0, self.cfg.vocab]));
        }
        let d = self.cfg.d_model;
        let dh = d / self.cfg.n_heads;
        let mask = if seq.valid_len == s {
            AttnMask::causal(s)
        } else {
            AttnMask::causal_padded(s, seq.valid_len)
        };
        let pos = self.wpe.slice_rows(0, s)?;
        let mut x = seq.embeddings.add(&pos)?;
        for b in &self.blocks {
            let normed = x.layer_norm(&b.ln1_g, &b.ln1_b, LN_EPS)?;
            let mut q = normed.matmul(&b.wq)?.add_row(&b.bq)?;
            let k = normed.matmul(&b.wk)?.add_row(&b.bk)?;
            let mut v = normed.matmul(&b.wv)?.add_row(&b.bv)?;
            if use_adapters {
                q = q.add(&b.lora_q.contribution(&normed)?)?;
                v = v.add(&b.lora_v.contribution(&normed)?)?;
            }
            let scale = 1.0 / (dh as f32).sqrt();
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            for h in 0..self.cfg.n_heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = q.slice_cols(lo, hi)?;
                let kh = k.slice_cols(lo, hi)?;
                let vh = v.slice_cols(lo, hi)?;
                let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
                let probs = scores.masked_softmax_rows(&mask)?;
                heads.push(probs.matmul(&vh)?);
            }
            let head_refs: Vec<&Tensor> = heads.iter().collect();
            let ctx = concat_cols(&head_refs)?;
            let att = ctx.matmul(&b.wo)?.add_row(&b.bo)?;
            x = x.add(&att)?;
            let normed2 = x.layer_norm(&b.ln2_g, &b.ln2_b, LN_EPS)?;
            let h1 = normed2.matmul(&b.w1)?.add_row(&b.b1)?.gelu();
            let h2 = h1.matmul(&b.w2)?.add_row(&b.b2)?;
            x = x.add(&h2)?;
        }
        let xf = x.layer_norm(&self.ln_f_g, &self.ln_f_b, LN_EPS)?;
        Ok(xf.matmul(&self.head_w)?.add_row(&self.head_b)?)
    }

    /// Answer-supervised training loss. Errors when nothing is supervised.
    pub fn loss(&self, seq: &MultimodalSequence, use_adapters: bool) -> Result<Tensor, LmError> {
        if seq.supervised_positions() == 0 {
            return Err(LmError::NoSupervision);
        }
        let logits = self.forward(seq, use_adapters)?;
        Ok(logits.softmax_ce_loss(&seq.labels)?)
    }

    /// Greedy decoding from an answer-less prefix until EOS, max_new tokens,
    /// or the position budget. Ties break toward the lowest token id.
    pub fn generate(
        &self,
        prefix: &MultimodalSequence,
        use_adapters: bool,
        max_new: usize,
    ) -> Result<Vec<u32>, LmError> {
        if prefix.len() > self.cfg.max_seq {
            return Err(LmError::LengthOverflow {
                audio: prefix.audio_span.1 - prefix.audio_span.0,
                video: prefix.video_span.1 - prefix.video_span.0,
                text: prefix.len() - prefix.video_span.1,
                total: prefix.len(),
                max: self.cfg.max_seq,
            });
        }
        let mut out = Vec::new();
        let mut embeddings = prefix.embeddings.clone();
        let mut len = prefix.len();
        if len == 0 {
            return Ok(out);
        }
        for _ in 0..max_new {
            if len >= self.cfg.max_seq {
                break;
            }
            let seq = MultimodalSequence {
                embeddings: embeddings.clone(),
                labels: vec![None; len],
                audio_span: prefix.audio_span,
                video_span: prefix.video_span,
                text_span: (prefix.text_span.0, len),
                valid_len: len,
            };
            let logits = self.forward(&seq, use_adapters)?;
            let row = logits.slice_rows(len - 1, len)?.data();
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            let tok = best as u32;
            if tok == EOS {
                break;
            }
            out.push(tok);
            let new_row = self.wte.embed(&[tok])?;
            embeddings = concat_rows(&[&embeddings, &new_row])?;
            len += 1;
        }
        Ok(out)
    }
}
