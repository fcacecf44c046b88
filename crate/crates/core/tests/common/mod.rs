//! Shared finite-difference oracle: an independent f64 re-implementation of
//! every differentiable op and of the full pretraining pipeline,
//! differentiated by central differences. Exercised per-op by the gradcheck
//! suite and wholesale by the acceptance criteria.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use scpc_core::imaging::{extract_grid, GridSpec, Image};
use scpc_core::loss::{contrastive_loss, ContrastiveBatch};
use scpc_core::models::{
    Autoregressor, AutoregressorConfig, Encoder, EncoderConfig, PadMode, RepRole, RepSequence,
};
use scpc_core::sequencing::{build_sequences, AnchorSpec, Direction};
use scpc_core::tensor::{Tape, Tensor, ValueId};
use scpc_core::Result;

pub const FD_STEP: f64 = 1e-3;
pub const OP_TOL: f64 = 1e-3;
/// End-to-end pipeline tolerance: relu-kink noise accumulates over ~300 ops.
pub const END_TO_END_TOL: f64 = 1e-2;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, rand_vec(n, rng)).unwrap().with_grad()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn widen(params: &[Tensor]) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.data().iter().map(|&v| v as f64).collect()).collect()
}

/// Check tape gradients of `build` against central finite differences of the
/// independent `reference` forward.
fn fd_check<F, G>(params: Vec<Tensor>, build: F, reference: G, tol: f64, label: &str)
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
    G: Fn(&[Vec<f64>]) -> f64,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&mut tape, &ids).unwrap();
    assert_eq!(tape.value(loss).len(), 1, "{label}: loss must be scalar");

    let mut wide = widen(&params);
    let f32_loss = tape.value(loss)[0] as f64;
    let ref_loss = reference(&wide);
    assert!(
        rel_err(f32_loss, ref_loss) < 1e-4,
        "{label}: forward parity broke: tape {f32_loss} vs reference {ref_loss}"
    );

    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).len()])
        })
        .collect();

    for pi in 0..wide.len() {
        for e in 0..wide[pi].len() {
            let orig = wide[pi][e];
            wide[pi][e] = orig + FD_STEP;
            let plus = reference(&wide);
            wide[pi][e] = orig - FD_STEP;
            let minus = reference(&wide);
            wide[pi][e] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let ad = analytic[pi][e] as f64;
            assert!(
                rel_err(ad, fd) <= tol,
                "{label}: param {pi} elem {e}: autodiff {ad} vs finite-diff {fd}"
            );
        }
    }
}

// ── f64 reference forwards ──────────────────────────────────────────────

mod ref64 {
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                for j in 0..n {
                    out[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        out
    }

    pub fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        input: &[f64],
        kernels: &[f64],
        ci: usize,
        h: usize,
        w: usize,
        co: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += input[(ic * h + iy as usize) * w + ix as usize]
                                        * kernels[((oc * ci + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    pub fn softmax(row: &[f64]) -> Vec<f64> {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            out.extend(softmax(&x[i * cols..(i + 1) * cols]));
        }
        out
    }

    pub fn layer_norm_row(row: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
        let d = row.len() as f64;
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        row.iter()
            .zip(gain.iter().zip(bias))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }

    pub fn normalize_row(row: &[f64]) -> Vec<f64> {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            row.iter().map(|v| v / norm).collect()
        } else {
            vec![0.0; row.len()]
        }
    }

    pub fn log_sum_exp(row: &[f64]) -> f64 {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }
}

// ── Per-op checks ───────────────────────────────────────────────────────

pub fn matmul_gradients() {
    let mut r = rng(11);
    let a = rand_tensor(vec![3, 4], &mut r);
    let b = rand_tensor(vec![4, 2], &mut r);
    let w: Vec<f64> = rand_vec(6, &mut r).into_iter().map(f64::from).collect();
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    fd_check(
        vec![a, b],
        |tape, ids| {
            let out = tape.matmul(ids[0], ids[1])?;
            let proj = tape.input(vec![3, 2], w32.clone())?;
            let p = tape.mul(out, proj)?;
            tape.sum(p)
        },
        |ps| ref64::dot(&ref64::matmul(&ps[0], &ps[1], 3, 4, 2), &w),
        OP_TOL,
        "matmul",
    );
}

pub fn conv2d_gradients() {
    for (stride, padding, seed) in [(1usize, 0usize, 21u64), (2, 1, 22), (1, 1, 23)] {
        let mut r = rng(seed);
        let input = rand_tensor(vec![2, 8, 8], &mut r);
        let kernels = rand_tensor(vec![3, 2, 3, 3], &mut r);
        let ho = (8 + 2 * padding - 3) / stride + 1;
        let out_len = 3 * ho * ho;
        let w: Vec<f64> = rand_vec(out_len, &mut r).into_iter().map(f64::from).collect();
        let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        fd_check(
            vec![input, kernels],
            |tape, ids| {
                let out = tape.conv2d(ids[0], ids[1], stride, padding)?;
                let proj = tape.input(vec![3, ho, ho], w32.clone())?;
                let p = tape.mul(out, proj)?;
                tape.sum(p)
            },
            |ps| {
                let out = ref64::conv2d(&ps[0], &ps[1], 2, 8, 8, 3, 3, 3, stride, padding);
                ref64::dot(&out, &w)
            },
            OP_TOL,
            "conv2d",
        );
    }
}

pub fn mean_pool_global_gradients() {
    let mut r = rng(31);
    let x = rand_tensor(vec![4, 5, 5], &mut r);

    // Backward distributes gradient / 25 uniformly.
    let mut tape = Tape::new();
    let id = tape.leaf(&x);
    let pooled = tape.mean_pool_global(id).unwrap();
    let loss = tape.sum(pooled).unwrap();
    tape.backward(loss).unwrap();
    for g in tape.grad(id).unwrap() {
        assert!((g - 1.0 / 25.0).abs() < 1e-7);
    }

    let w: Vec<f64> = rand_vec(4, &mut r).into_iter().map(f64::from).collect();
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    fd_check(
        vec![x],
        |tape, ids| {
            let out = tape.mean_pool_global(ids[0])?;
            let proj = tape.input(vec![4], w32.clone())?;
            let p = tape.mul(out, proj)?;
            tape.sum(p)
        },
        |ps| {
            let means: Vec<f64> =
                (0..4).map(|c| ps[0][c * 25..(c + 1) * 25].iter().sum::<f64>() / 25.0).collect();
            ref64::dot(&means, &w)
        },
        1e-4,
        "mean_pool_global",
    );
}

pub fn softmax_jacobian_matches_finite_differences() {
    let mut r = rng(41);
    let logits = rand_tensor(vec![6], &mut r);
    // Check the full Jacobian: each output component as its own scalar.
    for j in 0..6 {
        fd_check(
            vec![logits.clone()],
            |tape, ids| {
                let s = tape.softmax(ids[0])?;
                let mut pick = vec![0.0f32; 6];
                pick[j] = 1.0;
                let sel = tape.input(vec![6], pick)?;
                let p = tape.mul(s, sel)?;
                tape.sum(p)
            },
            |ps| ref64::softmax(&ps[0])[j],
            OP_TOL,
            "softmax",
        );
    }
}

pub fn attention_gradients() {
    let mut r = rng(51);
    let q = rand_tensor(vec![2, 4], &mut r);
    let k = rand_tensor(vec![3, 4], &mut r);
    let v = rand_tensor(vec![3, 4], &mut r);
    let w: Vec<f64> = rand_vec(8, &mut r).into_iter().map(f64::from).collect();
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    fd_check(
        vec![q, k, v],
        |tape, ids| {
            let out = tape.attention(ids[0], ids[1], ids[2])?;
            let proj = tape.input(vec![2, 4], w32.clone())?;
            let p = tape.mul(out, proj)?;
            tape.sum(p)
        },
        |ps| {
            let kt = ref64::transpose(&ps[1], 3, 4);
            let scores = ref64::matmul(&ps[0], &kt, 2, 4, 3);
            let scaled: Vec<f64> = scores.iter().map(|s| s / 2.0).collect();
            let weights = ref64::softmax_rows(&scaled, 2, 3);
            let out = ref64::matmul(&weights, &ps[2], 2, 3, 4);
            ref64::dot(&out, &w)
        },
        OP_TOL,
        "attention",
    );
}

pub fn elementwise_and_bias_gradients() {
    let mut r = rng(61);
    let a = rand_tensor(vec![3, 4], &mut r);
    let b = rand_tensor(vec![3, 4], &mut r);
    let w: Vec<f64> = rand_vec(12, &mut r).into_iter().map(f64::from).collect();
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    fd_check(
        vec![a.clone(), b.clone()],
        |tape, ids| {
            let sum = tape.add(ids[0], ids[1])?;
            let prod = tape.mul(sum, ids[1])?;
            let proj = tape.input(vec![3, 4], w32.clone())?;
            let p = tape.mul(prod, proj)?;
            tape.sum(p)
        },
        |ps| {
            let vals: Vec<f64> =
                (0..12).map(|i| (ps[0][i] + ps[1][i]) * ps[1][i]).collect();
            ref64::dot(&vals, &w)
        },
        OP_TOL,
        "add+mul",
    );

    let bias = rand_tensor(vec![4], &mut rng(62));
    fd_check(
        vec![a, bias],
        |tape, ids| {
            let out = tape.add_bias_rows(ids[0], ids[1])?;
            let proj = tape.input(vec![3, 4], w32.clone())?;
            let p = tape.mul(out, proj)?;
            tape.sum(p)
        },
        |ps| {
            let vals: Vec<f64> = (0..12).map(|i| ps[0][i] + ps[1][i % 4]).collect();
            ref64::dot(&vals, &w)
        },
        OP_TOL,
        "add_bias_rows",
    );

    let x = rand_tensor(vec![2, 3, 3], &mut rng(63));
    let cb = rand_tensor(vec![2], &mut rng(64));
    let w18: Vec<f64> = rand_vec(18, &mut rng(65)).into_iter().map(f64::from).collect();
    let w18_32: Vec<f32> = w18.iter().map(|&v| v as f32).collect();
    fd_check(
        vec![x, cb],
        |tape, ids| {
            let out = tape.add_channel_bias(ids[0], ids[1])?;
            let proj = tape.input(vec![2, 3, 3], w18_32.clone())?;
            let p = tape.mul(out, proj)?;
            tape.sum(p)
        },
        |ps| {
            let vals: Vec<f64> = (0..18).map(|i| ps[0][i] + ps[1][i / 9]).collect();
            ref64::dot(&vals, &w18)
        },
        OP_TOL,
        "add_channel_bias",
    );
}

pub fn relu_gradients() {
    // Keep values away from the kink at 0 so finite differences are valid.
    let data = vec![0.5f32, -0.7, 0.3, -0.2, 0.9, -0.4];
    let x = Tensor::new(vec![6], data).unwrap().with_grad();
    let w: Vec<f64> = rand_vec(6, &mut rng(71)).into_iter().map(f64::from).collect();
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    fd_check(
        vec![x],
        |tape, ids| {
            let out = tape.relu(ids[0])?;
            let proj = tape.input(vec![6], w32.clone())?;
            let p = tape.mul(out, proj)?;
            tape.sum(p)
        },
        |ps| {
            let vals: Vec<f64> = ps[0].iter().map(|&v| v.max(0.0)).collect();
            ref64::dot(&vals, &w)
        },
        OP_TOL,
        "relu",
    );
}

pub fn layer_norm_gradients() {
    let mut r = rng(81);
    let x = rand_tensor(vec![3, 5], &mut r);
    let gain = rand_tensor(vec![5], &mut r);
    let bias = rand_tensor(vec![5], &mut r);
    let w: Vec<f64> = rand_vec(15, &mut r).into_iter().map(f64::from).collect();
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    fd_check(
        vec![x, gain, bias],
        |tape, ids| {
            let out = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            let proj = tape.input(vec![3, 5], w32.clone())?;
            let p = tape.mul(out, proj)?;
            tape.sum(p)
        },
        |ps| {
            let mut vals = Vec::new();
            for i in 0..3 {
                vals.extend(ref64::layer_norm_row(&ps[0][i * 5..(i + 1) * 5], &ps[1], &ps[2], 1e-5));
            }
            ref64::dot(&vals, &w)
        },
        OP_TOL,
        "layer_norm",
    );
}

pub fn normalize_rows_gradients() {
    let mut r = rng(91);
    let x = rand_tensor(vec![3, 4], &mut r);
    let w: Vec<f64> = rand_vec(12, &mut r).into_iter().map(f64::from).collect();
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    fd_check(
        vec![x],
        |tape, ids| {
            let out = tape.normalize_rows(ids[0])?;
            let proj = tape.input(vec![3, 4], w32.clone())?;
            let p = tape.mul(out, proj)?;
            tape.sum(p)
        },
        |ps| {
            let mut vals = Vec::new();
            for i in 0..3 {
                vals.extend(ref64::normalize_row(&ps[0][i * 4..(i + 1) * 4]));
            }
            ref64::dot(&vals, &w)
        },
        OP_TOL,
        "normalize_rows",
    );
}

pub fn embed_concat_slice_reshape_gradients() {
    let mut r = rng(101);
    let table = rand_tensor(vec![5, 3], &mut r);
    let extra = rand_tensor(vec![2, 3], &mut r);
    let idx = [4usize, 0, 4, 2];
    let w: Vec<f64> = rand_vec(24, &mut r).into_iter().map(f64::from).collect();
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    fd_check(
        vec![table, extra],
        |tape, ids| {
            let rows = tape.embed(ids[0], &idx)?;
            let cat = tape.concat_rows(&[rows, ids[1]])?;
            let mid = tape.slice_rows(cat, 1, 4)?;
            let flat = tape.reshape(mid, vec![2, 6])?;
            let wide = tape.concat_cols(&[flat, flat])?;
            let proj = tape.input(vec![2, 12], w32.clone())?;
            let p = tape.mul(wide, proj)?;
            tape.sum(p)
        },
        |ps| {
            let mut cat = Vec::new();
            for &i in &idx {
                cat.extend_from_slice(&ps[0][i * 3..(i + 1) * 3]);
            }
            cat.extend_from_slice(&ps[1]);
            let mid = &cat[3..15]; // rows 1..5 of the 6x3 stack
            let mut wide = Vec::new();
            for row in 0..2 {
                wide.extend_from_slice(&mid[row * 6..(row + 1) * 6]);
                wide.extend_from_slice(&mid[row * 6..(row + 1) * 6]);
            }
            ref64::dot(&wide, &w)
        },
        OP_TOL,
        "embed+concat+slice+reshape",
    );
}

pub fn reduction_gradients() {
    let mut r = rng(111);
    let x = rand_tensor(vec![4, 3], &mut r);
    let w4: Vec<f64> = rand_vec(4, &mut r).into_iter().map(f64::from).collect();
    let w4_32: Vec<f32> = w4.iter().map(|&v| v as f32).collect();
    fd_check(
        vec![x.clone()],
        |tape, ids| {
            let rows = tape.sum_rows(ids[0])?;
            let proj = tape.input(vec![4], w4_32.clone())?;
            let p = tape.mul(rows, proj)?;
            tape.sum(p)
        },
        |ps| {
            let sums: Vec<f64> = (0..4).map(|i| ps[0][i * 3..(i + 1) * 3].iter().sum()).collect();
            ref64::dot(&sums, &w4)
        },
        OP_TOL,
        "sum_rows",
    );

    let w3: Vec<f64> = rand_vec(3, &mut r).into_iter().map(f64::from).collect();
    let w3_32: Vec<f32> = w3.iter().map(|&v| v as f32).collect();
    fd_check(
        vec![x],
        |tape, ids| {
            let m = tape.mean_rows(ids[0])?;
            let proj = tape.input(vec![3], w3_32.clone())?;
            let p = tape.mul(m, proj)?;
            tape.sum(p)
        },
        |ps| {
            let means: Vec<f64> =
                (0..3).map(|j| (0..4).map(|i| ps[0][i * 3 + j]).sum::<f64>() / 4.0).collect();
            ref64::dot(&means, &w3)
        },
        OP_TOL,
        "mean_rows",
    );
}

pub fn cross_entropy_gradients() {
    let mut r = rng(121);
    let logits = rand_tensor(vec![4, 5], &mut r);
    let targets = [0usize, 3, 2, 4];
    let w: Vec<f64> = (0..4).map(|_| r.random_range(0.25..1.0)).collect();
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    fd_check(
        vec![logits],
        |tape, ids| {
            let ce = tape.cross_entropy_rows(ids[0], &targets)?;
            let proj = tape.input(vec![4], w32.clone())?;
            let p = tape.mul(ce, proj)?;
            tape.sum(p)
        },
        |ps| {
            let losses: Vec<f64> = (0..4)
                .map(|i| {
                    let row = &ps[0][i * 5..(i + 1) * 5];
                    ref64::log_sum_exp(row) - row[targets[i]]
                })
                .collect();
            ref64::dot(&losses, &w)
        },
        OP_TOL,
        "cross_entropy_rows",
    );
}

pub fn transpose_and_scale_gradients() {
    let mut r = rng(131);
    let x = rand_tensor(vec![3, 4], &mut r);
    let w: Vec<f64> = rand_vec(12, &mut r).into_iter().map(f64::from).collect();
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    fd_check(
        vec![x],
        |tape, ids| {
            let t = tape.transpose(ids[0])?;
            let s = tape.scale(t, -2.5)?;
            let proj = tape.input(vec![4, 3], w32.clone())?;
            let p = tape.mul(s, proj)?;
            tape.sum(p)
        },
        |ps| {
            let t = ref64::transpose(&ps[0], 3, 4);
            let s: Vec<f64> = t.iter().map(|v| v * -2.5).collect();
            ref64::dot(&s, &w)
        },
        OP_TOL,
        "transpose+scale",
    );
}

// ── End-to-end pipeline check ───────────────────────────────────────────
//
// Full pretraining loss on a 5×5-grid toy (k=3, d=8, L=1, H=2): the f32
// pipeline's gradients vs finite differences of an independent f64
// re-implementation of encoder, autoregressor, and loss.

mod pipe64 {
    use super::ref64;
    use std::collections::HashMap;

    pub const EPS_LN: f64 = 1e-5;
    pub const TAU: f64 = 0.5;

    pub type Params = HashMap<String, Vec<f64>>;

    fn relu(v: &mut [f64]) {
        for x in v.iter_mut() {
            *x = x.max(0.0);
        }
    }

    fn add_bias_rows(x: &mut [f64], bias: &[f64]) {
        let d = bias.len();
        for (i, v) in x.iter_mut().enumerate() {
            *v += bias[i % d];
        }
    }

    /// Conv stack (4,3,2) then (8,3,2), padding 1, channel bias, relu;
    /// global mean pool; L2 normalize.
    pub fn encode_patch(patch: &[f64], p: usize, params: &Params) -> Vec<f64> {
        let stages = [(3usize, 4usize), (4, 8)];
        let mut act = patch.to_vec();
        let mut side = p;
        for (i, &(ci, co)) in stages.iter().enumerate() {
            let w = &params[&format!("enc.conv{i}.weight")];
            let b = &params[&format!("enc.conv{i}.bias")];
            let out_side = (side + 2 - 3) / 2 + 1;
            let mut out = ref64::conv2d(&act, w, ci, side, side, co, 3, 3, 2, 1);
            for oc in 0..co {
                for px in 0..out_side * out_side {
                    out[oc * out_side * out_side + px] += b[oc];
                }
            }
            relu(&mut out);
            act = out;
            side = out_side;
        }
        let plane = side * side;
        let pooled: Vec<f64> =
            (0..8).map(|c| act[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
        ref64::normalize_row(&pooled)
    }

    fn layer_norm(x: &[f64], n: usize, d: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            out.extend(ref64::layer_norm_row(&x[r * d..(r + 1) * d], gain, bias, EPS_LN));
        }
        out
    }

    fn attention(q: &[f64], k: &[f64], v: &[f64], n: usize, dh: usize) -> Vec<f64> {
        let kt = ref64::transpose(k, n, dh);
        let scores = ref64::matmul(q, &kt, n, dh, n);
        let scaled: Vec<f64> = scores.iter().map(|s| s / (dh as f64).sqrt()).collect();
        let weights = ref64::softmax_rows(&scaled, n, n);
        ref64::matmul(&weights, v, n, n, dh)
    }

    /// One pre-LN block with 2 heads of width 4, then the FF sublayer.
    fn block(x: &[f64], n: usize, d: usize, params: &Params) -> Vec<f64> {
        let normed = layer_norm(x, n, d, &params["ar.layer0.ln1.gain"], &params["ar.layer0.ln1.bias"]);
        let dh = d / 2;
        let mut cat = vec![0.0; n * d];
        for h in 0..2 {
            let q = ref64::matmul(&normed, &params[&format!("ar.layer0.head{h}.wq")], n, d, dh);
            let k = ref64::matmul(&normed, &params[&format!("ar.layer0.head{h}.wk")], n, d, dh);
            let v = ref64::matmul(&normed, &params[&format!("ar.layer0.head{h}.wv")], n, d, dh);
            let head = attention(&q, &k, &v, n, dh);
            for r in 0..n {
                cat[r * d + h * dh..r * d + (h + 1) * dh]
                    .copy_from_slice(&head[r * dh..(r + 1) * dh]);
            }
        }
        let proj = ref64::matmul(&cat, &params["ar.layer0.attn.wo"], n, d, d);
        let x1: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();

        let normed2 =
            layer_norm(&x1, n, d, &params["ar.layer0.ln2.gain"], &params["ar.layer0.ln2.bias"]);
        let ff = 16;
        let mut h1 = ref64::matmul(&normed2, &params["ar.layer0.ff.w1"], n, d, ff);
        add_bias_rows(&mut h1, &params["ar.layer0.ff.b1"]);
        relu(&mut h1);
        let mut h2 = ref64::matmul(&h1, &params["ar.layer0.ff.w2"], n, ff, d);
        add_bias_rows(&mut h2, &params["ar.layer0.ff.b2"]);
        x1.iter().zip(&h2).map(|(a, b)| a + b).collect()
    }

    /// Full pipeline: encode all 25 patches, predict the 16 targets from
    /// the 9 training cells, InfoNCE loss at temperature 0.5.
    pub fn pretrain_loss(
        patches: &[Vec<f64>],
        p: usize,
        train_idx: &[usize],
        target_idx: &[usize],
        params: &Params,
    ) -> f64 {
        let d = 8;
        let reps: Vec<Vec<f64>> = patches.iter().map(|pt| encode_patch(pt, p, params)).collect();

        let pos = &params["ar.pos.table"];
        let role = &params["ar.role.query"];
        let n_train = train_idx.len();
        let n_tgt = target_idx.len();
        let n = n_train + n_tgt;
        let mut tokens = vec![0.0f64; n * d];
        for (r, &idx) in train_idx.iter().enumerate() {
            for c in 0..d {
                tokens[r * d + c] = reps[idx][c] + pos[idx * d + c];
            }
        }
        for (r, &idx) in target_idx.iter().enumerate() {
            for c in 0..d {
                tokens[(n_train + r) * d + c] = pos[idx * d + c] + role[c];
            }
        }

        let x = block(&tokens, n, d, params);
        let queries = &x[n_train * d..];
        let mut out = ref64::matmul(queries, &params["ar.out.weight"], n_tgt, d, d);
        add_bias_rows(&mut out, &params["ar.out.bias"]);
        let preds: Vec<Vec<f64>> =
            (0..n_tgt).map(|r| ref64::normalize_row(&out[r * d..(r + 1) * d])).collect();

        let mut loss = 0.0;
        for (i, pred) in preds.iter().enumerate() {
            let mut logits = Vec::with_capacity(1 + n_train);
            logits.push(ref64::dot(pred, &reps[target_idx[i]]) / TAU);
            for &j in train_idx {
                logits.push(ref64::dot(pred, &reps[j]) / TAU);
            }
            loss += ref64::log_sum_exp(&logits) - logits[0];
        }
        loss
    }
}

pub fn end_to_end_pipeline_gradients() {
    let mut r = rng(201);
    let enc_cfg = EncoderConfig { stages: vec![(4, 3, 2), (8, 3, 2)], dim: 8, pad: PadMode::Direct };
    let enc = Encoder::new(enc_cfg, &mut r).unwrap();
    let ar_cfg = AutoregressorConfig { layers: 1, heads: 2, dim: 8, ff_width: 16, grid_side: 5 };
    let ar = Autoregressor::new(ar_cfg, &mut r).unwrap();

    // 24x24 image -> 5x5 grid of 8x8 patches
    let spec = GridSpec::new(24, 8).unwrap();
    assert_eq!(spec.grid_side(), 5);
    let img_data: Vec<f32> = (0..3 * 24 * 24).map(|i| ((i * 13 + 5) % 101) as f32 / 100.0).collect();
    let img = Image::new(24, 24, img_data).unwrap();
    let grid = extract_grid(&img, spec, 0).unwrap();

    let anchor = AnchorSpec { anchor: (0, 0), k: 3, direction: Direction::Forward, grid_side: 5 };
    let (train_seq, target_seq) = build_sequences(&anchor).unwrap();
    let flat = |coords: &[(usize, usize)]| coords.iter().map(|&(i, j)| i * 5 + j).collect::<Vec<_>>();
    let (train_idx, target_idx) = (flat(&train_seq.coords), flat(&target_seq.coords));

    // f32 autodiff pass
    let mut tape = Tape::new();
    let enc_bound = enc.params.bind(&mut tape);
    let ar_bound = ar.params.bind(&mut tape);
    let reps = enc.encode_grid(&mut tape, &enc_bound, &grid).unwrap();
    let train_vals = tape.embed(reps.values, &train_idx).unwrap();
    let target_vals = tape.embed(reps.values, &target_idx).unwrap();
    let train = RepSequence { values: train_vals, len: 9, dim: 8, role: RepRole::Train };
    let targets = RepSequence { values: target_vals, len: 16, dim: 8, role: RepRole::TargetEncoded };
    let preds = ar
        .predict_targets(&mut tape, &ar_bound, &train, &train_seq.coords, &target_seq.coords)
        .unwrap();
    let batch = ContrastiveBatch { predictions: preds, targets, train, texture_id: 0 };
    let out = contrastive_loss(&mut tape, &batch, 0.5, false).unwrap();
    let f32_loss = tape.value(out.loss)[0] as f64;
    tape.backward(out.loss).unwrap();

    // independent f64 reference
    let patches64: Vec<Vec<f64>> = (0..5)
        .flat_map(|i| (0..5).map(move |j| (i, j)))
        .map(|(i, j)| grid.patch(i, j).iter().map(|&v| v as f64).collect())
        .collect();
    let mut params: pipe64::Params = enc
        .params
        .entries()
        .chain(ar.params.entries())
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|&v| v as f64).collect()))
        .collect();
    let eval =
        |p: &pipe64::Params| pipe64::pretrain_loss(&patches64, 8, &train_idx, &target_idx, p);

    let ref_loss = eval(&params);
    assert!(
        rel_err(f32_loss, ref_loss) < 1e-4,
        "pipeline forward parity: tape {f32_loss} vs reference {ref_loss}"
    );

    // A 1e-3 step straddles relu kinks on parameters feeding many tokens;
    // the f64 reference is noise-free, so a tighter step is safe here.
    let step = 1e-4f64;
    let names: Vec<String> = params.keys().cloned().collect();
    let mut checked = 0usize;
    for name in names {
        let id = if name.starts_with("enc.") { enc_bound.id(&name) } else { ar_bound.id(&name) };
        let analytic = tape
            .grad(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; tape.value(id).len()]);
        let len = params[&name].len();
        for e in 0..len {
            let orig = params.get_mut(&name).unwrap()[e];
            params.get_mut(&name).unwrap()[e] = orig + step;
            let plus = eval(&params);
            params.get_mut(&name).unwrap()[e] = orig - step;
            let minus = eval(&params);
            params.get_mut(&name).unwrap()[e] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let ad = analytic[e] as f64;
            assert!(
                rel_err(ad, fd) <= END_TO_END_TOL,
                "pipeline: {name}[{e}]: autodiff {ad} vs finite-diff {fd}"
            );
            checked += 1;
        }
    }
    assert!(checked > 1000, "expected to sweep every parameter, got {checked}");
}

pub fn forward_is_deterministic() {
    let mut r = rng(141);
    let a = rand_tensor(vec![6, 6], &mut r);
    let b = rand_tensor(vec![6, 6], &mut r);
    let run = || {
        let mut tape = Tape::new();
        let ia = tape.leaf(&a);
        let ib = tape.leaf(&b);
        let m = tape.matmul(ia, ib).unwrap();
        let s = tape.softmax(m).unwrap();
        let l = tape.sum(s).unwrap();
        (tape.value(s).to_vec(), tape.value(l).to_vec())
    };
    assert_eq!(run(), run());
}

pub fn softmax_rows_sum_to_one_and_permute() {
    let mut r = rng(151);
    for _ in 0..20 {
        let n = r.random_range(2..8usize);
        let data: Vec<f32> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let mut tape = Tape::new();
        let x = tape.input(vec![n], data.clone()).unwrap();
        let s = tape.softmax(x).unwrap();
        let sv = tape.value(s).to_vec();
        assert!((sv.iter().sum::<f32>() - 1.0).abs() < 1e-6);

        // permutation equivariance: rotate input, output rotates with it
        let mut rotated = data.clone();
        rotated.rotate_left(1);
        let xr = tape.input(vec![n], rotated).unwrap();
        let sr = tape.softmax(xr).unwrap();
        let srv = tape.value(sr);
        for i in 0..n {
            assert!((sv[(i + 1) % n] - srv[i]).abs() < 1e-6);
        }
    }
}

/// Every per-op finite-difference check, for suites that sweep them all.
pub const OP_CHECKS: &[(&str, fn())] = &[
    ("matmul", matmul_gradients),
    ("conv2d", conv2d_gradients),
    ("mean_pool", mean_pool_global_gradients),
    ("softmax", softmax_jacobian_matches_finite_differences),
    ("attention", attention_gradients),
    ("elementwise_and_bias", elementwise_and_bias_gradients),
    ("relu", relu_gradients),
    ("layer_norm", layer_norm_gradients),
    ("normalize_rows", normalize_rows_gradients),
    ("embed_concat_slice_reshape", embed_concat_slice_reshape_gradients),
    ("reductions", reduction_gradients),
    ("cross_entropy", cross_entropy_gradients),
    ("transpose_and_scale", transpose_and_scale_gradients),
];
