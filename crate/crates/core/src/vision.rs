//! Vision branch: frame-directory ingestion, uniform frame sampling, a small
//! frozen patch-transformer encoder, and spatial/temporal mean pooling into
//! (patches + frames) video tokens.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels;
use crate::optim::Parameter;
use crate::rng::ComponentRng;
use crate::tensor::Tensor;
use crate::TokenMatrix;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image decode failed for {path}: {source}")]
    Decode {
        path: String,
        source: image::ImageError,
    },
    #[error("image encode failed: {0}")]
    Encode(#[from] image::ImageError),
    #[error("no frames found in {0}")]
    EmptyClip(String),
    #[error("frame {index} is {w}x{h}, expected {expected_w}x{expected_h}")]
    MixedFrameSizes {
        index: usize,
        w: usize,
        h: usize,
        expected_w: usize,
        expected_h: usize,
    },
    #[error("frame {w}x{h} too small for a {need}x{need} crop")]
    FrameTooSmall { w: usize, h: usize, need: usize },
}

/// One RGB frame, channel-interleaved floats in [0, 1].
#[derive(Clone, Debug)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Frame {
            width,
            height,
            pixels: bytes.iter().map(|b| *b as f32 / 255.0).collect(),
        }
    }
}

/// A sequence of equally sized frames.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
}

/// Load `frame_%06d.png` files from a directory, ordered by frame number.
pub fn load_frame_dir(dir: &Path) -> Result<VideoClip, VisionError> {
    let mut indexed: Vec<(u64, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name
            .strip_prefix("frame_")
            .and_then(|s| s.strip_suffix(".png"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            indexed.push((num, entry.path()));
        }
    }
    if indexed.is_empty() {
        return Err(VisionError::EmptyClip(dir.display().to_string()));
    }
    indexed.sort_by_key(|(n, _)| *n);
    let mut frames = Vec::with_capacity(indexed.len());
    for (i, (_, path)) in indexed.iter().enumerate() {
        let img = image::open(path)
            .map_err(|source| VisionError::Decode {
                path: path.display().to_string(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let frame = Frame::from_rgb8(w, h, img.as_raw());
        if let Some(first) = frames.first() {
            let first: &Frame = first;
            if first.width != w || first.height != h {
                return Err(VisionError::MixedFrameSizes {
                    index: i,
                    w,
                    h,
                    expected_w: first.width,
                    expected_h: first.height,
                });
            }
        }
        frames.push(frame);
    }
    Ok(VideoClip { frames })
}

/// Write one frame as `frame_%06d.png` (fixture output path).
pub fn save_frame_png(dir: &Path, index: usize, frame: &Frame) -> Result<(), VisionError> {
    let bytes: Vec<u8> = frame
        .pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(frame.width as u32, frame.height as u32, bytes)
        .expect("pixel buffer matches declared dimensions");
    let path = dir.join(format!("frame_{index:06}.png"));
    img.save(path)?;
    Ok(())
}

/// Uniform sampling indices: i_k = floor(k*T/N). Shorter clips repeat frames.
pub fn sample_indices(total: usize, n: usize) -> Vec<usize> {
    assert!(total >= 1, "cannot sample from an empty clip");
    assert!(n >= 1, "must sample at least one frame");
    (0..n).map(|k| (k * total / n).min(total - 1)).collect()
}

pub fn sample_frames(clip: &VideoClip, n: usize) -> VideoClip {
    let idx = sample_indices(clip.frames.len(), n);
    VideoClip {
        frames: idx.into_iter().map(|i| clip.frames[i].clone()).collect(),
    }
}

/// Per-frame patch features, [n_frames x n_patches x d].
#[derive(Clone, Debug)]
pub struct FrameFeatureGrid {
    pub n_frames: usize,
    pub n_patches: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FrameFeatureGrid {
    pub fn at(&self, frame: usize, patch: usize) -> &[f32] {
        let base = (frame * self.n_patches + patch) * self.dim;
        &self.values[base..base + self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionEncoderConfig {
    /// Canonical square input side; larger frames are cropped bottom/right to
    /// the patch grid, so 384 with patch 14 becomes a 27x27 grid (378 px).
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Frames sampled per clip.
    pub n_frames: usize,
    /// Learned per-patch position embeddings; disabled only in symmetry tests.
    pub use_positions: bool,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        VisionEncoderConfig {
            image_size: 384,
            patch: 14,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            n_frames: 100,
            use_positions: true,
        }
    }
}

impl VisionEncoderConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn patches_per_frame(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Video tokens this config emits: patches + frames.
    pub fn token_count(&self) -> usize {
        self.patches_per_frame() + self.n_frames
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

/// Frozen stand-in image encoder: non-overlapping patch flattening, linear
/// embedding, learned positions, bidirectional pre-norm blocks, final norm.
/// No CLS token; every patch keeps its own output row.
pub struct VisionEncoder {
    pub cfg: VisionEncoderConfig,
    patch_w: Tensor, // [patch*patch*3 x d_model]
    patch_b: Tensor,
    pos: Tensor, // [patches_per_frame x d_model]
    blocks: Vec<Block>,
    ln_post_g: Tensor,
    ln_post_b: Tensor,
}

const LN_EPS: f32 = 1e-5;

impl VisionEncoder {
    pub fn init(cfg: VisionEncoderConfig, rng: &mut ComponentRng) -> Self {
        let d = cfg.d_model;
        let in_dim = cfg.patch * cfg.patch * 3;
        let p = cfg.patches_per_frame();
        // Fan-in scaled init keeps frozen-encoder features at unit scale.
        let s = 1.0 / (d as f32).sqrt();
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
        VisionEncoder {
            cfg,
            patch_w: Tensor::new(&[in_dim, d], rng.normal(in_dim * d, 1.0 / (in_dim as f32).sqrt())),
            patch_b: Tensor::zeros(&[d]),
            pos: Tensor::new(&[p, d], rng.normal(p * d, s)),
            blocks,
            ln_post_g: Tensor::new(&[d], vec![1.0; d]),
            ln_post_b: Tensor::zeros(&[d]),
        }
    }

    pub fn named_parameters(&self) -> Vec<Parameter> {
        let mut out = vec![
            Parameter::new("vision.patch.w", self.patch_w.clone()),
            Parameter::new("vision.patch.b", self.patch_b.clone()),
            Parameter::new("vision.pos", self.pos.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |suffix: &str, t: &Tensor| Parameter::new(format!("vision.blocks.{i}.{suffix}"), t.clone());
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
        out.push(Parameter::new("vision.ln_post.g", self.ln_post_g.clone()));
        out.push(Parameter::new("vision.ln_post.b", self.ln_post_b.clone()));
        out
    }

    /// One frame -> per-patch last hidden state, [patches_per_frame x d].
    pub fn encode_frame(&self, frame: &Frame) -> Result<TokenMatrix, VisionError> {
        let g = self.cfg.grid_side();
        let need = g * self.cfg.patch;
        if frame.width < need || frame.height < need {
            return Err(VisionError::FrameTooSmall {
                w: frame.width,
                h: frame.height,
                need,
            });
        }
        let d = self.cfg.d_model;
        let ps = self.cfg.patch;
        let in_dim = ps * ps * 3;
        let p_total = g * g;

        // flatten patches row-major: patch (gy, gx), pixels row-major, RGB
        let mut flat = vec![0.0f32; p_total * in_dim];
        for gy in 0..g {
            for gx in 0..g {
                let pi = gy * g + gx;
                let dst = &mut flat[pi * in_dim..(pi + 1) * in_dim];
                let mut w = 0;
                for py in 0..ps {
                    let y = gy * ps + py;
                    for px in 0..ps {
                        let x = gx * ps + px;
                        let src = (y * frame.width + x) * 3;
                        dst[w] = frame.pixels[src];
                        dst[w + 1] = frame.pixels[src + 1];
                        dst[w + 2] = frame.pixels[src + 2];
                        w += 3;
                    }
                }
            }
        }

        let mut x = kernels::matmul(&flat, &self.patch_w.data(), p_total, in_dim, d);
        kernels::add_bias_rows(&mut x, &self.patch_b.data(), p_total);
        if self.cfg.use_positions {
            kernels::add_inplace(&mut x, &self.pos.data());
        }
        for b in &self.blocks {
            let normed = kernels::layer_norm_rows(&x, p_total, d, &b.ln1_g.data(), &b.ln1_b.data(), LN_EPS);
            let att = kernels::attention_full(
                &normed,
                p_total,
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
            let normed = kernels::layer_norm_rows(&x, p_total, d, &b.ln2_g.data(), &b.ln2_b.data(), LN_EPS);
            let mut h = kernels::matmul(&normed, &b.w1.data(), p_total, d, 4 * d);
            kernels::add_bias_rows(&mut h, &b.b1.data(), p_total);
            kernels::gelu_inplace(&mut h);
            let mut h2 = kernels::matmul(&h, &b.w2.data(), p_total, 4 * d, d);
            kernels::add_bias_rows(&mut h2, &b.b2.data(), p_total);
            kernels::add_inplace(&mut x, &h2);
        }
        let out = kernels::layer_norm_rows(&x, p_total, d, &self.ln_post_g.data(), &self.ln_post_b.data(), LN_EPS);
        Ok(TokenMatrix {
            rows: p_total,
            dim: d,
            values: out,
        })
    }

    /// Sample the configured number of frames and encode each.
    pub fn encode_clip(&self, clip: &VideoClip) -> Result<FrameFeatureGrid, VisionError> {
        if clip.frames.is_empty() {
            return Err(VisionError::EmptyClip("<in-memory clip>".into()));
        }
        let sampled = sample_frames(clip, self.cfg.n_frames);
        let p = self.cfg.patches_per_frame();
        let d = self.cfg.d_model;
        let mut values = Vec::with_capacity(sampled.frames.len() * p * d);
        for frame in &sampled.frames {
            let feats = self.encode_frame(frame)?;
            values.extend_from_slice(&feats.values);
        }
        Ok(FrameFeatureGrid {
            n_frames: sampled.frames.len(),
            n_patches: p,
            dim: d,
            values,
        })
    }
}

/// Spatial tokens (per patch, averaged over frames) followed by temporal
/// tokens (per frame, averaged over patches): exactly P + N rows.
pub fn pool_spatiotemporal(grid: &FrameFeatureGrid) -> TokenMatrix {
    assert!(grid.n_frames >= 1 && grid.n_patches >= 1);
    let (n, p, d) = (grid.n_frames, grid.n_patches, grid.dim);
    let mut out = vec![0.0f32; (p + n) * d];
    for pi in 0..p {
        for c in 0..d {
            let mut acc = 0.0f32;
            for f in 0..n {
                acc += grid.values[(f * p + pi) * d + c];
            }
            out[pi * d + c] = acc / n as f32;
        }
    }
    for f in 0..n {
        for c in 0..d {
            let mut acc = 0.0f32;
            for pi in 0..p {
                acc += grid.values[(f * p + pi) * d + c];
            }
            out[(p + f) * d + c] = acc / p as f32;
        }
    }
    TokenMatrix {
        rows: p + n,
        dim: d,
        values: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn solid_frame(w: usize, h: usize, rgb: [f32; 3]) -> Frame {
        let mut pixels = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            pixels.extend_from_slice(&rgb);
        }
        Frame {
            width: w,
            height: h,
            pixels,
        }
    }

    fn toy_encoder(use_positions: bool) -> VisionEncoder {
        let cfg = VisionEncoderConfig {
            image_size: 8,
            patch: 4,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            n_frames: 2,
            use_positions,
        };
        let mut rng = ComponentRng::for_component(11, "vision");
        VisionEncoder::init(cfg, &mut rng)
    }

    #[test]
    fn sampling_matches_stated_formula() {
        assert_eq!(sample_indices(10, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(sample_indices(3, 3), vec![0, 1, 2]);
        assert_eq!(sample_indices(2, 5), vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn sampling_is_idempotent_at_equal_counts() {
        let idx = sample_indices(7, 7);
        assert_eq!(idx, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn toy_frame_yields_four_patches() {
        let enc = toy_encoder(true);
        let tokens = enc.encode_frame(&solid_frame(8, 8, [0.2, 0.4, 0.6])).unwrap();
        assert_eq!(tokens.rows, 4);
        assert_eq!(tokens.dim, 16);
    }

    #[test]
    fn paper_scale_grid_arithmetic() {
        let cfg = VisionEncoderConfig::default();
        assert_eq!(cfg.grid_side(), 27);
        assert_eq!(cfg.patches_per_frame(), 729);
        assert_eq!(cfg.token_count(), 829);
    }

    #[test]
    fn constant_image_gives_identical_tokens_without_positions() {
        let enc = toy_encoder(false);
        let tokens = enc.encode_frame(&solid_frame(8, 8, [0.3, 0.5, 0.9])).unwrap();
        let first = tokens.row(0).to_vec();
        for p in 1..tokens.rows {
            assert_eq!(tokens.row(p), &first[..], "patch {p} differs");
        }
    }

    #[test]
    fn oversized_frame_is_cropped_bottom_right() {
        let enc = toy_encoder(true);
        // 11x10 with patch 4, grid 2: only the top-left 8x8 should matter
        let mut big = solid_frame(11, 10, [0.1, 0.1, 0.1]);
        let small = solid_frame(8, 8, [0.1, 0.1, 0.1]);
        // poison the crop margin; tokens must not change
        for y in 0..10 {
            for x in 0..11 {
                if x >= 8 || y >= 8 {
                    let i = (y * 11 + x) * 3;
                    big.pixels[i] = 1.0;
                    big.pixels[i + 1] = 0.0;
                    big.pixels[i + 2] = 1.0;
                }
            }
        }
        let a = enc.encode_frame(&big).unwrap();
        let b = enc.encode_frame(&small).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn undersized_frame_is_rejected() {
        let enc = toy_encoder(true);
        let err = enc.encode_frame(&solid_frame(6, 8, [0.0; 3])).unwrap_err();
        assert!(matches!(err, VisionError::FrameTooSmall { w: 6, h: 8, need: 8 }));
    }

    #[test]
    fn pool_degenerate_single_cell() {
        let grid = FrameFeatureGrid {
            n_frames: 1,
            n_patches: 1,
            dim: 3,
            values: vec![1.0, 2.0, 3.0],
        };
        let out = pool_spatiotemporal(&grid);
        assert_eq!(out.rows, 2);
        assert_eq!(out.values, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn pool_matches_worked_example() {
        // two frames, two patches, d=1: frame0 [1,3], frame1 [5,7]
        let grid = FrameFeatureGrid {
            n_frames: 2,
            n_patches: 2,
            dim: 1,
            values: vec![1.0, 3.0, 5.0, 7.0],
        };
        let out = pool_spatiotemporal(&grid);
        assert_eq!(out.values, vec![3.0, 5.0, 2.0, 6.0]);
    }

    #[test]
    fn frame_permutation_moves_temporal_tokens_only() {
        let grid = FrameFeatureGrid {
            n_frames: 2,
            n_patches: 2,
            dim: 1,
            values: vec![1.0, 3.0, 5.0, 7.0],
        };
        let swapped = FrameFeatureGrid {
            n_frames: 2,
            n_patches: 2,
            dim: 1,
            values: vec![5.0, 7.0, 1.0, 3.0],
        };
        let a = pool_spatiotemporal(&grid);
        let b = pool_spatiotemporal(&swapped);
        assert_eq!(a.values[0..2], b.values[0..2]); // spatial unchanged
        assert_eq!(a.values[2], b.values[3]); // temporal permuted
        assert_eq!(a.values[3], b.values[2]);
    }

    #[test]
    fn grand_mean_is_conserved() {
        let mut state = 1234u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) % 1000) as f32 / 500.0 - 1.0
        };
        let (n, p, d) = (3, 5, 4);
        let values: Vec<f32> = (0..n * p * d).map(|_| next()).collect();
        let grid = FrameFeatureGrid { n_frames: n, n_patches: p, dim: d, values: values.clone() };
        let out = pool_spatiotemporal(&grid);
        for c in 0..d {
            let grand: f64 = (0..n * p).map(|i| values[i * d + c] as f64).sum::<f64>() / (n * p) as f64;
            let spatial: f64 = (0..p).map(|i| out.values[i * d + c] as f64).sum::<f64>() / p as f64;
            let temporal: f64 =
                (0..n).map(|i| out.values[(p + i) * d + c] as f64).sum::<f64>() / n as f64;
            assert!((spatial - grand).abs() < 1e-6);
            assert!((temporal - grand).abs() < 1e-6);
        }
    }

    #[test]
    fn frame_dir_round_trip_and_ordering() {
        let dir = tempdir().unwrap();
        // write out of order to prove numeric sort
        for (i, shade) in [(2usize, 0.8f32), (0, 0.2), (1, 0.5)] {
            save_frame_png(dir.path(), i, &solid_frame(4, 4, [shade, shade, shade])).unwrap();
        }
        let clip = load_frame_dir(dir.path()).unwrap();
        assert_eq!(clip.frames.len(), 3);
        let shades: Vec<f32> = clip.frames.iter().map(|f| f.pixels[0]).collect();
        assert!((shades[0] - 0.2).abs() < 0.01);
        assert!((shades[1] - 0.5).abs() < 0.01);
        assert!((shades[2] - 0.8).abs() < 0.01);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempdir().unwrap();
        assert!(matches!(
            load_frame_dir(dir.path()),
            Err(VisionError::EmptyClip(_))
        ));
    }

    #[test]
    fn mismatched_frame_sizes_are_rejected() {
        let dir = tempdir().unwrap();
        save_frame_png(dir.path(), 0, &solid_frame(4, 4, [0.5; 3])).unwrap();
        save_frame_png(dir.path(), 1, &solid_frame(6, 4, [0.5; 3])).unwrap();
        assert!(matches!(
            load_frame_dir(dir.path()),
            Err(VisionError::MixedFrameSizes { index: 1, .. })
        ));
    }
}
