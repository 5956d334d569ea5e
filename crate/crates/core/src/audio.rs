//! Audio branch: WAV ingestion, log-mel frontend, a small frozen transformer
//! encoder over mel frames, and pooling down to a fixed token budget.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels;
use crate::optim::Parameter;
use crate::rng::ComponentRng;
use crate::tensor::Tensor;
use crate::TokenMatrix;

pub const CANONICAL_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("wav read failed: {0}")]
    Wav(#[from] hound::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported wav encoding: {0}")]
    Unsupported(String),
    #[error("empty waveform")]
    Empty,
    #[error("spectrogram has {got} mel bins, encoder expects {expected}")]
    MelBinMismatch { got: usize, expected: usize },
}

/// Mono waveform, values in [-1, 1].
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_seconds(&self) -> f32 {
        self.samples.len() as f32 / self.sample_rate as f32
    }
}

/// Load a RIFF/WAVE file: PCM16 or float32, mono or stereo. Stereo channels
/// are averaged; anything not at 16 kHz is linearly resampled to it; values
/// are clamped to [-1, 1].
pub fn load_wav(path: &Path) -> Result<Waveform, AudioError> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(AudioError::Unsupported(format!(
            "{} channels",
            spec.channels
        )));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(AudioError::Unsupported(format!("{fmt:?} {bits}-bit")));
        }
    };
    if interleaved.is_empty() {
        return Err(AudioError::Empty);
    }
    let ch = spec.channels as usize;
    let mono: Vec<f32> = if ch == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(ch)
            .map(|frame| frame.iter().sum::<f32>() / ch as f32)
            .collect()
    };
    let resampled = if spec.sample_rate == CANONICAL_RATE {
        mono
    } else {
        resample_linear(&mono, spec.sample_rate, CANONICAL_RATE)
    };
    let clamped = resampled.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Ok(Waveform {
        samples: clamped,
        sample_rate: CANONICAL_RATE,
    })
}

/// Write a mono 16 kHz PCM16 file (fixture output path).
pub fn save_wav_pcm16(path: &Path, samples: &[f32]) -> Result<(), AudioError> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: CANONICAL_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

fn resample_linear(x: &[f32], from: u32, to: u32) -> Vec<f32> {
    let out_len = (x.len() as u64 * to as u64 / from as u64) as usize;
    let ratio = from as f64 / to as f64;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * ratio;
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(x.len() - 1);
        let frac = (pos - i0 as f64) as f32;
        out.push(x[i0] * (1.0 - frac) + x[i1] * frac);
    }
    out
}

// -------------------------------------------------------------------
// Log-mel frontend
// -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    /// Waveform is zero-padded or truncated to this many seconds before the
    /// STFT, so output width is independent of input duration.
    pub target_seconds: f32,
    pub f_min: f32,
    pub f_max: f32,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_fft: 400,
            hop: 160,
            n_mels: 80,
            target_seconds: 30.0,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

/// [n_mels x n_frames] log-energy matrix, row-major with mel bins as rows.
/// Values are clamped to an 8-decade window below the global peak and then
/// affinely mapped by (x + 4) / 4.
#[derive(Clone, Debug)]
pub struct LogMel {
    pub values: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub hop: usize,
    /// Normalized clamp floor actually applied; every value is >= this.
    pub floor: f32,
}

impl LogMel {
    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    /// Column-major view: one row per frame, used by the encoder stem.
    pub fn frames_major(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.values.len()];
        for m in 0..self.n_mels {
            for t in 0..self.n_frames {
                out[t * self.n_mels + m] = self.values[m * self.n_frames + t];
            }
        }
        out
    }
}

fn mel_of_hz(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn hz_of_mel(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank on the HTK scale, [n_mels x (n_fft/2 + 1)].
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> Vec<f32> {
    let n_bins = cfg.n_fft / 2 + 1;
    let mel_lo = mel_of_hz(cfg.f_min as f64);
    let mel_hi = mel_of_hz(cfg.f_max as f64);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| hz_of_mel(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = vec![0.0f32; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            fb[m * n_bins + k] = w as f32;
        }
    }
    fb
}

/// Number of full analysis windows in a padded stream of `padded_len` samples.
pub fn frame_count(padded_len: usize, n_fft: usize, hop: usize) -> usize {
    if padded_len < n_fft {
        return 0;
    }
    1 + (padded_len - n_fft) / hop
}

/// Waveform -> log-mel spectrogram, Whisper-convention constants by default.
pub fn log_mel(w: &Waveform, cfg: &MelConfig) -> LogMel {
    let target_len = (cfg.target_seconds as f64 * w.sample_rate as f64).round() as usize;
    let mut padded = w.samples.clone();
    padded.resize(target_len, 0.0);

    let n_frames = frame_count(target_len, cfg.n_fft, cfg.hop);
    let n_bins = cfg.n_fft / 2 + 1;
    let hann: Vec<f32> = (0..cfg.n_fft)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.n_fft as f64).cos())
        .map(|v| v as f32)
        .collect();

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let fb = mel_filterbank(cfg, w.sample_rate);

    // power[t * n_bins + k]
    let mut power = vec![0.0f32; n_frames * n_bins];
    let mut buf = vec![Complex::new(0.0f32, 0.0f32); cfg.n_fft];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for i in 0..cfg.n_fft {
            buf[i] = Complex::new(padded[start + i] * hann[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power[t * n_bins + k] = buf[k].norm_sqr();
        }
    }

    let mut values = vec![0.0f32; cfg.n_mels * n_frames];
    let mut log_max = f32::NEG_INFINITY;
    for m in 0..cfg.n_mels {
        let filt = &fb[m * n_bins..(m + 1) * n_bins];
        for t in 0..n_frames {
            let mut e = 0.0f32;
            for k in 0..n_bins {
                e += filt[k] * power[t * n_bins + k];
            }
            let v = e.max(1e-10).log10();
            values[m * n_frames + t] = v;
            log_max = log_max.max(v);
        }
    }
    let log_floor = log_max - 8.0;
    for v in values.iter_mut() {
        *v = (v.max(log_floor) + 4.0) / 4.0;
    }
    LogMel {
        values,
        n_mels: cfg.n_mels,
        n_frames,
        hop: cfg.hop,
        floor: (log_floor + 4.0) / 4.0,
    }
}

// -------------------------------------------------------------------
// Encoder and pooling
// -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioEncoderConfig {
    pub n_mels: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Fixed output token count after pooling.
    pub budget: usize,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        AudioEncoderConfig {
            n_mels: 80,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            budget: 64,
        }
    }
}

struct Block {
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
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Frozen stand-in speech encoder: stride-2 conv stem over mel frames,
/// sinusoidal positions, bidirectional pre-norm blocks, final layer norm.
/// Runs on plain f32 kernels; no gradient ever flows through it.
pub struct AudioEncoder {
    pub cfg: AudioEncoderConfig,
    conv_w: Tensor, // [d_model x n_mels x 3]
    conv_b: Tensor,
    blocks: Vec<Block>,
    ln_post_g: Tensor,
    ln_post_b: Tensor,
}

const LN_EPS: f32 = 1e-5;

impl AudioEncoder {
    pub fn init(cfg: AudioEncoderConfig, rng: &mut ComponentRng) -> Self {
        let d = cfg.d_model;
        // Fan-in scaled init keeps frozen-encoder features at unit scale.
        let s = 1.0 / (d as f32).sqrt();
        let conv_fan = cfg.n_mels * 3;
        let conv_w = Tensor::new(
            &[d, cfg.n_mels, 3],
            rng.normal(d * conv_fan, 1.0 / (conv_fan as f32).sqrt()),
        );
        let conv_b = Tensor::zeros(&[d]);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1_g: Tensor::new(&[d], vec![1.0; d]),
                ln1_b: Tensor::zeros(&[d]),
                wq: Tensor::new(&[d, d], rng.normal(d * d, s)),
                bq: Tensor::zeros(&[d]),
                wk: Tensor::new(&[d, d], rng.normal(d * d, s)),
                bk: Tensor::zeros(&[d]),
                wv: Tensor::new(&[d, d], rng.normal(d * d, s)),
                bv: Tensor::zeros(&[d]),
                wo: Tensor::new(&[d, d], rng.normal(d * d, s)),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::new(&[d], vec![1.0; d]),
                ln2_b: Tensor::zeros(&[d]),
                w1: Tensor::new(&[d, 4 * d], rng.normal(d * 4 * d, s)),
                b1: Tensor::zeros(&[4 * d]),
                w2: Tensor::new(&[4 * d, d], rng.normal(4 * d * d, s * 0.5)),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        AudioEncoder {
            cfg,
            conv_w,
            conv_b,
            blocks,
            ln_post_g: Tensor::new(&[d], vec![1.0; d]),
            ln_post_b: Tensor::zeros(&[d]),
        }
    }

    pub fn named_parameters(&self) -> Vec<Parameter> {
        let mut out = vec![
            Parameter::new("audio.conv.w", self.conv_w.clone()),
            Parameter::new("audio.conv.b", self.conv_b.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |suffix: &str, t: &Tensor| Parameter::new(format!("audio.blocks.{i}.{suffix}"), t.clone());
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
        out.push(Parameter::new("audio.ln_post.g", self.ln_post_g.clone()));
        out.push(Parameter::new("audio.ln_post.b", self.ln_post_b.clone()));
        out
    }

    /// Mel frames -> last hidden state, [ceil(n_frames/2) x d_model].
    pub fn encode(&self, mel: &LogMel) -> Result<TokenMatrix, AudioError> {
        if mel.n_mels != self.cfg.n_mels {
            return Err(AudioError::MelBinMismatch {
                got: mel.n_mels,
                expected: self.cfg.n_mels,
            });
        }
        let d = self.cfg.d_model;
        let t_in = mel.n_frames;
        let t_out = t_in.div_ceil(2);
        let x_in = mel.frames_major(); // [t_in x n_mels]
        let cw = self.conv_w.data();
        let cb = self.conv_b.data();

        // 1-D conv over frames: kernel 3, stride 2, zero pad 1.
        let mut x = vec![0.0f32; t_out * d];
        let nm = self.cfg.n_mels;
        for t in 0..t_out {
            let center = (t * 2) as isize;
            for o in 0..d {
                let mut acc = cb[o];
                for (ki, off) in (-1isize..=1).enumerate() {
                    let src = center + off;
                    if src < 0 || src >= t_in as isize {
                        continue;
                    }
                    let frame = &x_in[src as usize * nm..(src as usize + 1) * nm];
                    let w = &cw[o * nm * 3..];
                    for m in 0..nm {
                        acc += w[m * 3 + ki] * frame[m];
                    }
                }
                x[t * d + o] = acc;
            }
        }
        kernels::gelu_inplace(&mut x);
        kernels::add_inplace(&mut x, &kernels::sinusoidal_positions(t_out, d));

        for b in &self.blocks {
            let normed = kernels::layer_norm_rows(&x, t_out, d, &b.ln1_g.data(), &b.ln1_b.data(), LN_EPS);
            let att = kernels::attention_full(
                &normed,
                t_out,
                d,
                self.cfg.n_heads,
                &b.wq.data(),
                &b.bq.data(),
                &b.wk.data(),
                &b.bk.data(),
                &b.wv.data(),
                &b.bv.data(),
                &b.wo.data(),
                &b.bo.data(),
            );
            kernels::add_inplace(&mut x, &att);
            let normed = kernels::layer_norm_rows(&x, t_out, d, &b.ln2_g.data(), &b.ln2_b.data(), LN_EPS);
            let mut h = kernels::matmul(&normed, &b.w1.data(), t_out, d, 4 * d);
            kernels::add_bias_rows(&mut h, &b.b1.data(), t_out);
            kernels::gelu_inplace(&mut h);
            let mut h2 = kernels::matmul(&h, &b.w2.data(), t_out, 4 * d, d);
            kernels::add_bias_rows(&mut h2, &b.b2.data(), t_out);
            kernels::add_inplace(&mut x, &h2);
        }
        let out = kernels::layer_norm_rows(&x, t_out, d, &self.ln_post_g.data(), &self.ln_post_b.data(), LN_EPS);
        Ok(TokenMatrix {
            rows: t_out,
            dim: d,
            values: out,
        })
    }
}

/// Mean-pool `frames` rows down to exactly `budget` rows. Frames are split
/// into `budget` contiguous chunks as equal as possible (larger chunks
/// first); inputs shorter than the budget are padded by repeating the last
/// frame before chunking.
pub fn pool_to_budget(frames: &TokenMatrix, budget: usize) -> TokenMatrix {
    assert!(frames.rows >= 1, "pool_to_budget needs at least one frame");
    assert!(budget >= 1, "pool_to_budget needs a positive budget");
    let d = frames.dim;
    let mut padded;
    let (x, t) = if frames.rows < budget {
        padded = frames.values.clone();
        let last = frames.values[(frames.rows - 1) * d..frames.rows * d].to_vec();
        for _ in frames.rows..budget {
            padded.extend_from_slice(&last);
        }
        (&padded[..], budget)
    } else {
        (&frames.values[..], frames.rows)
    };
    let mut out = vec![0.0f32; budget * d];
    for k in 0..budget {
        let start = (k * t).div_ceil(budget);
        let end = ((k + 1) * t).div_ceil(budget);
        let count = (end - start) as f32;
        for j in 0..d {
            let mut acc = 0.0f32;
            for r in start..end {
                acc += x[r * d + j];
            }
            out[k * d + j] = acc / count;
        }
    }
    TokenMatrix {
        rows: budget,
        dim: d,
        values: out,
    }
}
