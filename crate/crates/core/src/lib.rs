//! Audio-visual-text multimodal language model, desk scale.
//!
//! The pipeline: a waveform becomes log-mel frames, runs through a small
//! frozen speech encoder, and is mean-pooled to a fixed audio token budget;
//! video frames are patch-encoded by a frozen image encoder and pooled into
//! spatial-plus-temporal tokens; both streams pass through trainable two-layer
//! GELU projectors into the embedding space of a small causal decoder LM,
//! where they are concatenated (audio, then video, then text) and trained
//! with answer-only supervision. Finetuning adapts the LM through low-rank
//! adapters on the attention q/v projections while the base stays frozen.
//!
//! Everything is f32 with fixed reduction order: same seed, same bytes.

pub mod audio;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub(crate) mod kernels;
pub mod lm;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod vision;

/// Row-major [rows x dim] matrix of token embeddings, the hand-off type
/// between the frozen encoders and the differentiable projectors.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl TokenMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        TokenMatrix {
            rows,
            dim,
            values: vec![0.0; rows * dim],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}
