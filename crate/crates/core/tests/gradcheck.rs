//! Central finite-difference oracle for every differentiable op and for the
//! assembled model. Each check rebuilds the computation from plain values,
//! nudges one input element by +-h, and compares the slope against the
//! backward pass.

use avx_core::audio::{AudioEncoderConfig, MelConfig};
use avx_core::data::make_fixtures;
use avx_core::lm::LmConfig;
use avx_core::model::{AvlmConfig, Model};
use avx_core::tensor::{concat_cols, concat_rows, AttnMask, Tensor};
use avx_core::tokenizer;
use avx_core::vision::VisionEncoderConfig;
use tempfile::tempdir;

/// Splitmix-style generator: deterministic values in (-0.5, 0.5) with no
/// dependence on the library's own RNG.
struct Mix(u64);

impl Mix {
    fn next_f(&mut self) -> f32 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        (z >> 40) as f32 / (1u64 << 24) as f32 - 0.5
    }

    fn vec(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.next_f()).collect()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn fd_component(x0: &[f32], i: usize, h: f32, loss_of: &impl Fn(&[f32]) -> f32) -> f64 {
    let mut xp = x0.to_vec();
    xp[i] += h;
    let mut xm = x0.to_vec();
    xm[i] -= h;
    (f64::from(loss_of(&xp)) - f64::from(loss_of(&xm))) / (2.0 * f64::from(h))
}

/// Check d loss / d x against central differences at every element of `x0`.
fn check_input(op: &str, x0: &[f32], analytic: &[f32], loss_of: impl Fn(&[f32]) -> f32) {
    assert_eq!(x0.len(), analytic.len());
    let h = 1e-2f32;
    for i in 0..x0.len() {
        let fd = fd_component(x0, i, h, &loss_of);
        let a = f64::from(analytic[i]);
        let rel = rel_err(a, fd);
        assert!(rel < 1e-3, "{op}[{i}]: analytic {a:.6e}, fd {fd:.6e}, rel {rel:.2e}");
    }
}

/// Weighted sum turns any matrix output into a scalar loss whose weights
/// break symmetry, so no gradient component can hide behind another.
fn weighted(out: &Tensor, w: &[f32]) -> Tensor {
    let wt = Tensor::new(&out.shape(), w.to_vec());
    out.mul(&wt).unwrap().sum()
}

fn grad_of(x0: &[f32], shape: &[usize], w: &[f32], build: impl Fn(&Tensor) -> Tensor) -> Vec<f32> {
    let x = Tensor::with_grad(shape, x0.to_vec());
    let loss = weighted(&build(&x), w);
    loss.backward().unwrap();
    x.grad().unwrap()
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = Mix(1);
    let shape = [3usize, 4];
    let x0 = rng.vec(12);
    let other = rng.vec(12);
    let w = rng.vec(12);

    let o = other.clone();
    check_input(
        "add",
        &x0,
        &grad_of(&x0, &shape, &w, |x| {
            x.add(&Tensor::new(&shape, o.clone())).unwrap()
        }),
        |v| {
            let x = Tensor::new(&shape, v.to_vec());
            weighted(&x.add(&Tensor::new(&shape, other.clone())).unwrap(), &w).item()
        },
    );

    let o = other.clone();
    check_input(
        "sub",
        &x0,
        &grad_of(&x0, &shape, &w, |x| {
            x.sub(&Tensor::new(&shape, o.clone())).unwrap()
        }),
        |v| {
            let x = Tensor::new(&shape, v.to_vec());
            weighted(&x.sub(&Tensor::new(&shape, other.clone())).unwrap(), &w).item()
        },
    );

    let o = other.clone();
    check_input(
        "mul",
        &x0,
        &grad_of(&x0, &shape, &w, |x| {
            x.mul(&Tensor::new(&shape, o.clone())).unwrap()
        }),
        |v| {
            let x = Tensor::new(&shape, v.to_vec());
            weighted(&x.mul(&Tensor::new(&shape, other.clone())).unwrap(), &w).item()
        },
    );

    check_input(
        "scale",
        &x0,
        &grad_of(&x0, &shape, &w, |x| x.scale(-1.7)),
        |v| weighted(&Tensor::new(&shape, v.to_vec()).scale(-1.7), &w).item(),
    );

    check_input(
        "gelu",
        &x0,
        &grad_of(&x0, &shape, &w, |x| x.gelu()),
        |v| weighted(&Tensor::new(&shape, v.to_vec()).gelu(), &w).item(),
    );
}

#[test]
fn reductions_match_finite_differences() {
    let mut rng = Mix(2);
    let shape = [2usize, 5];
    let x0 = rng.vec(10);

    let x = Tensor::with_grad(&shape, x0.clone());
    x.sum().backward().unwrap();
    check_input("sum", &x0, &x.grad().unwrap(), |v| {
        Tensor::new(&shape, v.to_vec()).sum().item()
    });

    let x = Tensor::with_grad(&shape, x0.clone());
    x.mean().backward().unwrap();
    check_input("mean", &x0, &x.grad().unwrap(), |v| {
        Tensor::new(&shape, v.to_vec()).mean().item()
    });
}

#[test]
fn bias_broadcast_matches_finite_differences() {
    let mut rng = Mix(3);
    let shape = [3usize, 4];
    let x0 = rng.vec(12);
    let bias0 = rng.vec(4);
    let w = rng.vec(12);

    let b = bias0.clone();
    check_input(
        "add_row.x",
        &x0,
        &grad_of(&x0, &shape, &w, |x| {
            x.add_row(&Tensor::new(&[4], b.clone())).unwrap()
        }),
        |v| {
            let x = Tensor::new(&shape, v.to_vec());
            weighted(&x.add_row(&Tensor::new(&[4], bias0.clone())).unwrap(), &w).item()
        },
    );

    let x_fixed = x0.clone();
    let bias = Tensor::with_grad(&[4], bias0.clone());
    let loss = weighted(
        &Tensor::new(&shape, x_fixed.clone()).add_row(&bias).unwrap(),
        &w,
    );
    loss.backward().unwrap();
    check_input("add_row.bias", &bias0, &bias.grad().unwrap(), |v| {
        let x = Tensor::new(&shape, x_fixed.clone());
        weighted(&x.add_row(&Tensor::new(&[4], v.to_vec())).unwrap(), &w).item()
    });
}

#[test]
fn matmul_matches_finite_differences_on_both_sides() {
    let mut rng = Mix(4);
    let a0 = rng.vec(3 * 4);
    let b0 = rng.vec(4 * 5);
    let w = rng.vec(3 * 5);

    let bv = b0.clone();
    check_input(
        "matmul.lhs",
        &a0,
        &grad_of(&a0, &[3, 4], &w, |a| {
            a.matmul(&Tensor::new(&[4, 5], bv.clone())).unwrap()
        }),
        |v| {
            let a = Tensor::new(&[3, 4], v.to_vec());
            weighted(&a.matmul(&Tensor::new(&[4, 5], b0.clone())).unwrap(), &w).item()
        },
    );

    let av = a0.clone();
    check_input(
        "matmul.rhs",
        &b0,
        &grad_of(&b0, &[4, 5], &w, |b| {
            Tensor::new(&[3, 4], av.clone()).matmul(b).unwrap()
        }),
        |v| {
            let b = Tensor::new(&[4, 5], v.to_vec());
            weighted(&Tensor::new(&[3, 4], a0.clone()).matmul(&b).unwrap(), &w).item()
        },
    );
}

#[test]
fn reshaping_ops_match_finite_differences() {
    let mut rng = Mix(5);
    let x0 = rng.vec(4 * 6);

    let w = rng.vec(4 * 6);
    check_input(
        "transpose",
        &x0,
        &grad_of(&x0, &[4, 6], &w, |x| x.transpose().unwrap()),
        |v| {
            weighted(&Tensor::new(&[4, 6], v.to_vec()).transpose().unwrap(), &w).item()
        },
    );

    let w = rng.vec(2 * 6);
    check_input(
        "slice_rows",
        &x0,
        &grad_of(&x0, &[4, 6], &w, |x| x.slice_rows(1, 3).unwrap()),
        |v| {
            weighted(&Tensor::new(&[4, 6], v.to_vec()).slice_rows(1, 3).unwrap(), &w).item()
        },
    );

    let w = rng.vec(4 * 3);
    check_input(
        "slice_cols",
        &x0,
        &grad_of(&x0, &[4, 6], &w, |x| x.slice_cols(2, 5).unwrap()),
        |v| {
            weighted(&Tensor::new(&[4, 6], v.to_vec()).slice_cols(2, 5).unwrap(), &w).item()
        },
    );
}

#[test]
fn concat_routes_gradients_to_both_parts() {
    let mut rng = Mix(6);
    let a0 = rng.vec(2 * 3);
    let b0 = rng.vec(4 * 3);
    let w = rng.vec(6 * 3);

    let bv = b0.clone();
    check_input(
        "concat_rows.first",
        &a0,
        &grad_of(&a0, &[2, 3], &w, |a| {
            concat_rows(&[a, &Tensor::new(&[4, 3], bv.clone())]).unwrap()
        }),
        |v| {
            let a = Tensor::new(&[2, 3], v.to_vec());
            weighted(&concat_rows(&[&a, &Tensor::new(&[4, 3], b0.clone())]).unwrap(), &w).item()
        },
    );

    let av = a0.clone();
    check_input(
        "concat_rows.second",
        &b0,
        &grad_of(&b0, &[4, 3], &w, |b| {
            concat_rows(&[&Tensor::new(&[2, 3], av.clone()), b]).unwrap()
        }),
        |v| {
            let b = Tensor::new(&[4, 3], v.to_vec());
            weighted(&concat_rows(&[&Tensor::new(&[2, 3], a0.clone()), &b]).unwrap(), &w).item()
        },
    );

    let c0 = rng.vec(2 * 5);
    let w = rng.vec(2 * 8);
    let cv = c0.clone();
    check_input(
        "concat_cols.first",
        &a0,
        &grad_of(&a0, &[2, 3], &w, |a| {
            concat_cols(&[a, &Tensor::new(&[2, 5], cv.clone())]).unwrap()
        }),
        |v| {
            let a = Tensor::new(&[2, 3], v.to_vec());
            weighted(&concat_cols(&[&a, &Tensor::new(&[2, 5], c0.clone())]).unwrap(), &w).item()
        },
    );
}

#[test]
fn layer_norm_matches_finite_differences_on_all_inputs() {
    let mut rng = Mix(7);
    let shape = [3usize, 5];
    let x0 = rng.vec(15);
    let g0: Vec<f32> = rng.vec(5).iter().map(|v| v + 1.0).collect();
    let b0 = rng.vec(5);
    let w = rng.vec(15);
    let eps = 1e-5;

    let (gv, bv) = (g0.clone(), b0.clone());
    check_input(
        "layer_norm.x",
        &x0,
        &grad_of(&x0, &shape, &w, |x| {
            x.layer_norm(&Tensor::new(&[5], gv.clone()), &Tensor::new(&[5], bv.clone()), eps)
                .unwrap()
        }),
        |v| {
            let x = Tensor::new(&shape, v.to_vec());
            let y = x
                .layer_norm(&Tensor::new(&[5], g0.clone()), &Tensor::new(&[5], b0.clone()), eps)
                .unwrap();
            weighted(&y, &w).item()
        },
    );

    let xv = x0.clone();
    let bv = b0.clone();
    let gain = Tensor::with_grad(&[5], g0.clone());
    let loss = weighted(
        &Tensor::new(&shape, xv.clone())
            .layer_norm(&gain, &Tensor::new(&[5], bv.clone()), eps)
            .unwrap(),
        &w,
    );
    loss.backward().unwrap();
    check_input("layer_norm.gain", &g0, &gain.grad().unwrap(), |v| {
        let y = Tensor::new(&shape, xv.clone())
            .layer_norm(&Tensor::new(&[5], v.to_vec()), &Tensor::new(&[5], bv.clone()), eps)
            .unwrap();
        weighted(&y, &w).item()
    });

    let xv = x0.clone();
    let gv = g0.clone();
    let bias = Tensor::with_grad(&[5], b0.clone());
    let loss = weighted(
        &Tensor::new(&shape, xv.clone())
            .layer_norm(&Tensor::new(&[5], gv.clone()), &bias, eps)
            .unwrap(),
        &w,
    );
    loss.backward().unwrap();
    check_input("layer_norm.bias", &b0, &bias.grad().unwrap(), |v| {
        let y = Tensor::new(&shape, xv.clone())
            .layer_norm(&Tensor::new(&[5], gv.clone()), &Tensor::new(&[5], v.to_vec()), eps)
            .unwrap();
        weighted(&y, &w).item()
    });
}

#[test]
fn masked_softmax_matches_finite_differences() {
    let mut rng = Mix(8);
    let x0 = rng.vec(4 * 4);
    let w = rng.vec(4 * 4);

    check_input(
        "masked_softmax.causal",
        &x0,
        &grad_of(&x0, &[4, 4], &w, |x| {
            x.masked_softmax_rows(&AttnMask::causal(4)).unwrap()
        }),
        |v| {
            let x = Tensor::new(&[4, 4], v.to_vec());
            weighted(&x.masked_softmax_rows(&AttnMask::causal(4)).unwrap(), &w).item()
        },
    );

    check_input(
        "masked_softmax.padded",
        &x0,
        &grad_of(&x0, &[4, 4], &w, |x| {
            x.masked_softmax_rows(&AttnMask::causal_padded(4, 3)).unwrap()
        }),
        |v| {
            let x = Tensor::new(&[4, 4], v.to_vec());
            weighted(
                &x.masked_softmax_rows(&AttnMask::causal_padded(4, 3)).unwrap(),
                &w,
            )
            .item()
        },
    );
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let mut rng = Mix(9);
    let x0: Vec<f32> = rng.vec(5 * 7).iter().map(|v| v * 4.0).collect();
    let labels = [Some(2u32), None, Some(6), Some(0), None];

    let x = Tensor::with_grad(&[5, 7], x0.clone());
    x.softmax_ce_loss(&labels).unwrap().backward().unwrap();
    let g = x.grad().unwrap();

    // Closed form in f64 over every component: on a labeled row the
    // gradient is (softmax(z) - onehot) / n_sup, ignored rows get zero.
    let n_sup = labels.iter().flatten().count() as f64;
    for (i, l) in labels.iter().enumerate() {
        let row = &x0[i * 7..(i + 1) * 7];
        let Some(id) = l else {
            assert!(g[i * 7..(i + 1) * 7].iter().all(|v| *v == 0.0), "row {i}");
            continue;
        };
        let m = f64::from(row.iter().copied().fold(f32::NEG_INFINITY, f32::max));
        let exps: Vec<f64> = row.iter().map(|&z| (f64::from(z) - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for j in 0..7 {
            let p = exps[j] / denom;
            let onehot = if j == *id as usize { 1.0 } else { 0.0 };
            let want = (p - onehot) / n_sup;
            let got = f64::from(g[i * 7 + j]);
            assert!(
                (got - want).abs() < 1e-6,
                "row {i} col {j}: backward {got:.6e}, closed form {want:.6e}"
            );
        }
    }

    // Central differences resolve only the dominant components in f32; the
    // small ones sit below the eps*loss/(2h) noise floor and are covered by
    // the closed form above.
    let loss_of = |v: &[f32]| {
        Tensor::new(&[5, 7], v.to_vec())
            .softmax_ce_loss(&labels)
            .unwrap()
            .item()
    };
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
    for &i in order.iter().take(6) {
        let fd = fd_component(&x0, i, 1e-2, &loss_of);
        let rel = rel_err(f64::from(g[i]), fd);
        assert!(
            rel < 1e-3,
            "softmax_ce_loss[{i}]: analytic {:.6e}, fd {fd:.6e}, rel {rel:.2e}",
            g[i]
        );
    }
}

#[test]
fn embedding_matches_finite_differences() {
    let mut rng = Mix(10);
    let table0 = rng.vec(9 * 4);
    // Repeated id 3 checks gradient accumulation across lookups.
    let ids = [3u32, 0, 3, 7];
    let w = rng.vec(4 * 4);

    check_input(
        "embed.table",
        &table0,
        &grad_of(&table0, &[9, 4], &w, |t| t.embed(&ids).unwrap()),
        |v| {
            let t = Tensor::new(&[9, 4], v.to_vec());
            weighted(&t.embed(&ids).unwrap(), &w).item()
        },
    );
}

fn tiny_av_config(seed: u64) -> AvlmConfig {
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
            patch: 16,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            n_frames: 2,
            use_positions: true,
        },
        lm: LmConfig {
            vocab: tokenizer::VOCAB_SIZE,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq: 128,
            lora_rank: 2,
            lora_alpha: 4.0,
        },
        proj_hidden: 0,
    }
}

// End to end: the full audio + video + text loss against finite differences
// on parameters sampled from every differentiable component. Adapters get
// small nonzero values first so both halves of each pair carry gradient.
#[test]
fn model_loss_gradients_match_finite_differences() {
    let dir = tempdir().unwrap();
    let set = make_fixtures(dir.path(), 1, 21, 1.0).unwrap();
    let s = &set.samples[0];
    let model = Model::init(tiny_av_config(21));

    let mut rng = Mix(11);
    for p in model.named_parameters() {
        if p.name.starts_with("lora.") {
            let n = p.tensor.numel();
            let vals: Vec<f32> = (0..n).map(|_| rng.next_f() * 0.2).collect();
            p.tensor.set_data(&vals);
        }
    }

    let sample = model
        .prepare(
            s.audio_path(dir.path()).as_deref(),
            s.frames_path(dir.path()).as_deref(),
            &s.question,
            s.answer.as_deref(),
        )
        .unwrap();
    let loss = model.sample_loss(&sample, true).unwrap();
    loss.backward().unwrap();

    let loss_at = || model.sample_loss(&sample, true).unwrap().item();

    // Strict pass: scalar parameters whose gradient component is large
    // enough that the loss delta 2h|g_i| clears the f32 quantization floor
    // of the forward pass (one ULP of the loss is ~7e-7). Two central
    // differences combine via Richardson extrapolation, (4*D(h/2) - D(h))/3,
    // cancelling the h^2 truncation term that otherwise dominates on curved
    // directions. Up to three components per tensor, largest |g| first.
    let mut checked = 0usize;
    for p in model.named_parameters() {
        if !p.tensor.requires_grad() {
            continue;
        }
        let g = p.tensor.grad().expect("grad tracked");
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|a, b| g[*b].abs().total_cmp(&g[*a].abs()));
        for &i in order.iter().take(3) {
            let gi = f64::from(g[i]);
            if gi.abs() < 3e-2 {
                break;
            }
            let orig = p.tensor.data();
            let slope_at = |h: f32| {
                let mut vals = orig.clone();
                vals[i] = orig[i] + h;
                p.tensor.set_data(&vals);
                let up = loss_at();
                vals[i] = orig[i] - h;
                p.tensor.set_data(&vals);
                let down = loss_at();
                p.tensor.set_data(&orig);
                (f64::from(up) - f64::from(down)) / (2.0 * f64::from(h))
            };
            let h = (3e-3 / gi.abs()).clamp(5e-3, 9e-2) as f32;
            let fd = (4.0 * slope_at(h / 2.0) - slope_at(h)) / 3.0;
            let rel = rel_err(gi, fd);
            assert!(
                rel < 1e-3,
                "{}[{i}]: analytic {gi:.6e}, fd {fd:.6e}, rel {rel:.2e}",
                p.name,
            );
            checked += 1;
        }
    }
    assert!(checked >= 20, "only {checked} parameters carried a resolvable gradient");

    // Breadth pass: a directional derivative along each tensor's own unit
    // gradient direction, whose slope is ||g||. Media-path tensors
    // (projectors, adapters) carry gradients far below what f32 forward
    // noise permits at the strict tolerance, so this pass runs at a bar
    // that still catches sign flips, dropped paths and scale errors.
    for p in model.named_parameters() {
        if !p.tensor.requires_grad() {
            continue;
        }
        let g = p.tensor.grad().expect("grad tracked");
        let norm = g.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt();
        if norm < 1e-2 {
            continue;
        }
        let dir: Vec<f32> = g.iter().map(|v| (f64::from(*v) / norm) as f32).collect();
        let orig = p.tensor.data();
        let slope_at = |h: f32| {
            let up_vals: Vec<f32> = orig.iter().zip(&dir).map(|(v, d)| v + h * d).collect();
            p.tensor.set_data(&up_vals);
            let up = loss_at();
            let down_vals: Vec<f32> = orig.iter().zip(&dir).map(|(v, d)| v - h * d).collect();
            p.tensor.set_data(&down_vals);
            let down = loss_at();
            p.tensor.set_data(&orig);
            (f64::from(up) - f64::from(down)) / (2.0 * f64::from(h))
        };
        let h = (1e-3 / norm).clamp(5e-3, 5e-2) as f32;
        let fd = (4.0 * slope_at(h / 2.0) - slope_at(h)) / 3.0;
        let rel = rel_err(norm, fd);
        assert!(
            rel < 5e-2,
            "{} direction: analytic {norm:.6e}, fd {fd:.6e}, rel {rel:.2e}",
            p.name,
        );
    }
}
