//! Model behavior: normalization, determinism, equivariance, padding paths,
//! and the collapse baseline.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use scpc_core::imaging::{extract_grid, GridSpec, Image, PatchGrid};
use scpc_core::models::{
    Autoregressor, AutoregressorConfig, Encoder, EncoderConfig, HeadConfig, LinearHead, PadMode,
};
use scpc_core::tensor::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_patch(side: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..3 * side * side).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn small_encoder(pad: PadMode, seed: u64) -> Encoder {
    let cfg = EncoderConfig { stages: vec![(4, 3, 2), (8, 3, 2)], dim: 8, pad };
    Encoder::new(cfg, &mut rng(seed)).unwrap()
}

#[test]
fn zero_patch_with_zero_biases_encodes_to_zero() {
    let enc = small_encoder(PadMode::Direct, 1);
    let mut tape = Tape::new();
    let bound = enc.params.bind(&mut tape);
    let out = enc.encode_patch(&mut tape, &bound, &vec![0.0; 3 * 64], 8).unwrap();
    assert!(tape.value(out).iter().all(|v| *v == 0.0), "zero in, zero out, zero-norm convention");
}

#[test]
fn identical_patches_encode_identically() {
    let enc = small_encoder(PadMode::Direct, 2);
    let patch = random_patch(8, &mut rng(3));
    let mut tape = Tape::new();
    let bound = enc.params.bind(&mut tape);
    let a = enc.encode_patch(&mut tape, &bound, &patch, 8).unwrap();
    let b = enc.encode_patch(&mut tape, &bound, &patch, 8).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
}

#[test]
fn pad_to_full_differs_from_direct() {
    // same seed, same weights; only the padding path differs
    let direct = small_encoder(PadMode::Direct, 4);
    let padded = small_encoder(PadMode::PadToFull(16), 4);
    let patch = random_patch(8, &mut rng(5));
    let mut tape = Tape::new();
    let bd = direct.params.bind(&mut tape);
    let bp = padded.params.bind(&mut tape);
    let a = direct.encode_patch(&mut tape, &bd, &patch, 8).unwrap();
    let b = padded.encode_patch(&mut tape, &bp, &patch, 8).unwrap();
    let differ = tape
        .value(a)
        .iter()
        .zip(tape.value(b))
        .any(|(x, y)| (x - y).abs() > 1e-6);
    assert!(differ, "padding path must not be dead code");
}

#[test]
fn encoded_vectors_are_unit_or_zero() {
    let enc = small_encoder(PadMode::Direct, 6);
    let spec = GridSpec::new(24, 8).unwrap();
    let img = Image::new(24, 24, (0..3 * 576).map(|i| (i % 97) as f32 / 96.0).collect()).unwrap();
    let grid = extract_grid(&img, spec, 0).unwrap();
    let mut tape = Tape::new();
    let bound = enc.params.bind(&mut tape);
    let reps = enc.encode_grid(&mut tape, &bound, &grid).unwrap();
    assert_eq!(reps.len, 25);
    assert_eq!(tape.shape(reps.values), &[25, 8]);
    for r in 0..25 {
        let row = &tape.value(reps.values)[r * 8..(r + 1) * 8];
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5 || norm == 0.0, "row {r} norm {norm}");
    }
}

#[test]
fn default_grid_yields_forty_nine_rows() {
    let enc = Encoder::new(EncoderConfig::default(), &mut rng(7)).unwrap();
    let spec = GridSpec::new(64, 16).unwrap();
    let img = Image::filled(64, 64, 0.25).unwrap();
    let grid = extract_grid(&img, spec, 0).unwrap();
    let mut tape = Tape::new();
    let bound = enc.params.bind(&mut tape);
    let reps = enc.encode_grid(&mut tape, &bound, &grid).unwrap();
    assert_eq!(tape.shape(reps.values), &[49, 64]);

    // 1x1 grid: a single vector
    let spec1 = GridSpec::new(16, 16).unwrap();
    let img1 = Image::filled(16, 16, 0.5).unwrap();
    let grid1 = extract_grid(&img1, spec1, 0).unwrap();
    let reps1 = enc.encode_grid(&mut tape, &bound, &grid1).unwrap();
    assert_eq!(tape.shape(reps1.values), &[1, 64]);
}

#[test]
fn encode_grid_is_permutation_equivariant() {
    let enc = small_encoder(PadMode::Direct, 8);
    let spec = GridSpec::new(16, 8).unwrap(); // s=3
    let mut r = rng(9);
    let patches: Vec<Vec<f32>> = (0..9).map(|_| random_patch(8, &mut r)).collect();
    let mut swapped = patches.clone();
    swapped.swap(2, 7);
    let grid = PatchGrid::from_patches(spec, patches, 0).unwrap();
    let grid_swapped = PatchGrid::from_patches(spec, swapped, 0).unwrap();

    let mut tape = Tape::new();
    let bound = enc.params.bind(&mut tape);
    let a = enc.encode_grid(&mut tape, &bound, &grid).unwrap();
    let b = enc.encode_grid(&mut tape, &bound, &grid_swapped).unwrap();
    let (va, vb) = (tape.value(a.values).to_vec(), tape.value(b.values).to_vec());
    let row = |v: &[f32], r: usize| v[r * 8..(r + 1) * 8].to_vec();
    for i in 0..9 {
        let j = match i {
            2 => 7,
            7 => 2,
            other => other,
        };
        assert_eq!(row(&va, i), row(&vb, j), "row {i} should move to {j}");
    }
}

fn toy_ar(seed: u64) -> Autoregressor {
    let cfg = AutoregressorConfig { layers: 1, heads: 2, dim: 8, ff_width: 16, grid_side: 5 };
    Autoregressor::new(cfg, &mut rng(seed)).unwrap()
}

fn train_setup(tape: &mut Tape, seed: u64) -> scpc_core::models::RepSequence {
    let mut r = rng(seed);
    let data: Vec<f32> = (0..9 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
    let t = Tensor::new(vec![9, 8], data).unwrap();
    let values = tape.leaf(&t);
    scpc_core::models::RepSequence {
        values,
        len: 9,
        dim: 8,
        role: scpc_core::models::RepRole::Train,
    }
}

fn coords_for_k3() -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let train: Vec<_> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
    let mut target = Vec::new();
    for r in 0..5 {
        for c in 0..5 {
            if !(r < 3 && c < 3) {
                target.push((r, c));
            }
        }
    }
    (train, target)
}

#[test]
fn predictions_are_normalized_and_counted() {
    let ar = toy_ar(10);
    let mut tape = Tape::new();
    let bound = ar.params.bind(&mut tape);
    let train = train_setup(&mut tape, 11);
    let (tc, gc) = coords_for_k3();
    let preds = ar.predict_targets(&mut tape, &bound, &train, &tc, &gc).unwrap();
    assert_eq!(preds.len, 16, "4k+4 targets for k=3");
    assert_eq!(tape.shape(preds.values), &[16, 8]);
    for r in 0..16 {
        let row = &tape.value(preds.values)[r * 8..(r + 1) * 8];
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5, "row {r} norm {norm}");
    }
}

#[test]
fn target_coordinate_permutation_permutes_predictions() {
    let ar = toy_ar(12);
    let mut tape = Tape::new();
    let bound = ar.params.bind(&mut tape);
    let train = train_setup(&mut tape, 13);
    let (tc, gc) = coords_for_k3();
    let mut reversed = gc.clone();
    reversed.reverse();

    let a = ar.predict_targets(&mut tape, &bound, &train, &tc, &gc).unwrap();
    let b = ar.predict_targets(&mut tape, &bound, &train, &tc, &reversed).unwrap();
    let (va, vb) = (tape.value(a.values).to_vec(), tape.value(b.values).to_vec());
    for i in 0..16 {
        // permuting queries reorders softmax summations, so equality is up
        // to f32 rounding rather than bitwise
        let j = 15 - i;
        for (x, y) in va[i * 8..(i + 1) * 8].iter().zip(&vb[j * 8..(j + 1) * 8]) {
            assert!((x - y).abs() < 1e-5, "row {i} vs reversed {j}: {x} vs {y}");
        }
    }
}

#[test]
fn zero_output_projection_collapses_predictions() {
    let mut ar = toy_ar(14);
    let d = ar.cfg.dim;
    *ar.params.get_mut("ar.out.weight") = Tensor::zeros(vec![d, d]).with_grad();
    let mut bias_rng = rng(15);
    let bias: Vec<f32> = (0..d).map(|_| bias_rng.random_range(-1.0..1.0)).collect();
    *ar.params.get_mut("ar.out.bias") = Tensor::new(vec![d], bias).unwrap().with_grad();

    let mut tape = Tape::new();
    let bound = ar.params.bind(&mut tape);
    let (tc, gc) = coords_for_k3();
    let train_a = train_setup(&mut tape, 16);
    let train_b = train_setup(&mut tape, 17);
    let a = ar.predict_targets(&mut tape, &bound, &train_a, &tc, &gc).unwrap();
    let b = ar.predict_targets(&mut tape, &bound, &train_b, &tc, &gc).unwrap();

    let va = tape.value(a.values);
    let first = &va[..8];
    for r in 1..16 {
        assert_eq!(&va[r * 8..(r + 1) * 8], first, "all rows collapse to the bias direction");
    }
    assert_eq!(va, tape.value(b.values), "collapsed output ignores the inputs");
}

#[test]
fn fixed_seed_predictions_are_reproducible() {
    let run = || {
        let ar = toy_ar(18);
        let mut tape = Tape::new();
        let bound = ar.params.bind(&mut tape);
        let train = train_setup(&mut tape, 19);
        let (tc, gc) = coords_for_k3();
        let preds = ar.predict_targets(&mut tape, &bound, &train, &tc, &gc).unwrap();
        tape.value(preds.values).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn out_of_table_coordinates_rejected() {
    let ar = toy_ar(20);
    let mut tape = Tape::new();
    let bound = ar.params.bind(&mut tape);
    let train = train_setup(&mut tape, 21);
    let (tc, _) = coords_for_k3();
    let err = ar.predict_targets(&mut tape, &bound, &train, &tc, &[(5, 0)]);
    assert!(err.is_err());
}

#[test]
fn config_invariants_enforced() {
    let bad = AutoregressorConfig { layers: 1, heads: 3, dim: 8, ff_width: 16, grid_side: 5 };
    assert!(Autoregressor::new(bad, &mut rng(22)).is_err(), "8 not divisible by 3");

    let bad = EncoderConfig { stages: vec![(4, 3, 2), (8, 3, 2)], dim: 16, pad: PadMode::Direct };
    assert!(Encoder::new(bad, &mut rng(23)).is_err(), "final channels != dim");

    assert!(LinearHead::new(HeadConfig { in_dim: 8, classes: 1 }, &mut rng(24)).is_err());
    assert!(LinearHead::new(HeadConfig { in_dim: 8, classes: 4 }, &mut rng(25)).is_ok());
}

#[test]
fn head_logits_shape_and_grad_path() {
    let head = LinearHead::new(HeadConfig { in_dim: 8, classes: 3 }, &mut rng(26)).unwrap();
    let mut tape = Tape::new();
    let bound = head.params.bind(&mut tape);
    let reps = train_setup(&mut tape, 27);
    let logits = head.logits(&mut tape, &bound, reps.values).unwrap();
    assert_eq!(tape.shape(logits), &[9, 3]);
    let ce = tape.cross_entropy_rows(logits, &[0, 1, 2, 0, 1, 2, 0, 1, 2]).unwrap();
    let loss = tape.sum(ce).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(bound.id("head.weight")).unwrap().iter().any(|g| *g != 0.0));
}
