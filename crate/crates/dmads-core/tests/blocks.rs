//! The three fusion/attention blocks: zero-parameter identities, shape
//! contracts, straight-line composition oracles and gradient checks.

mod common;

use common::{check_param_grads, rand_tensor, rng, GradTol};
use dmads_core::blocks::{Frfb, Lfa, Mscfa};
use dmads_core::nn::{Binder, ParameterStore};
use dmads_core::{ConvSpec, Graph, Shape, Tensor, UpsampleMode, Var};
use rand_chacha::ChaCha8Rng;

fn build<L>(
    seed: u64,
    init: impl FnOnce(&mut ParameterStore<f64>, &mut ChaCha8Rng) -> L,
) -> (L, ParameterStore<f64>) {
    let mut store = ParameterStore::new();
    let mut r = rng(seed);
    let layer = init(&mut store, &mut r);
    (layer, store)
}

/// Convolution straight from named store tensors, for the oracles below.
fn conv_by_name(
    g: &Graph<f64>,
    store: &ParameterStore<f64>,
    name: &str,
    x: Var,
    spec: &ConvSpec,
) -> Var {
    let w = g.input(store.get(&format!("{name}.w")).unwrap().clone());
    let b = g.input(store.get(&format!("{name}.b")).unwrap().clone());
    g.conv2d(x, w, Some(b), spec).unwrap()
}

fn residual_by_name(
    g: &Graph<f64>,
    store: &ParameterStore<f64>,
    name: &str,
    x: Var,
    c: usize,
) -> Var {
    let spec = ConvSpec::same(c, c, 3, 1);
    let h = g.relu(conv_by_name(g, store, &format!("{name}.c1"), x, &spec)).unwrap();
    let h = conv_by_name(g, store, &format!("{name}.c2"), h, &spec);
    g.relu(g.add(h, x).unwrap()).unwrap()
}

// ---- MSCFA ------------------------------------------------------------

#[test]
fn mscfa_zero_params_is_identity() {
    let (block, mut store) = build(1, |s, r| Mscfa::init(s, r, "m", 4));
    store.zero_all();
    let mut r = rng(2);
    let x = rand_tensor(&mut r, Shape::new(1, 4, 8, 8), -1.0, 1.0);
    let g = Graph::new();
    let b = Binder::new(&g, &store);
    let y = block.forward(&b, g.input(x.clone())).unwrap();
    assert_eq!(g.value(y).data(), x.data(), "residual add must be exact");
}

#[test]
fn mscfa_preserves_shape() {
    let (block, store) = build(3, |s, r| Mscfa::init(s, r, "m", 8));
    let g = Graph::new();
    let b = Binder::new(&g, &store);
    let x = g.input(Tensor::zeros(Shape::new(1, 8, 32, 32)));
    let y = block.forward(&b, x).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 8, 32, 32));
}

#[test]
fn mscfa_rejects_sub_2x2_input() {
    let (block, store) = build(4, |s, r| Mscfa::init(s, r, "m", 4));
    let g = Graph::new();
    let b = Binder::new(&g, &store);
    let x = g.input(Tensor::zeros(Shape::new(1, 4, 1, 4)));
    assert!(block.forward(&b, x).is_err());
}

/// Straight-line recomputation of the three-path structure from tensor ops
/// and raw parameter tensors only (no layer structs).
#[test]
fn mscfa_matches_straight_line_composition() {
    let c = 4;
    let (block, store) = build(5, |s, r| Mscfa::init(s, r, "m", c));
    let mut r = rng(6);
    let x = rand_tensor(&mut r, Shape::new(1, c, 10, 10), -1.0, 1.0);

    let g = Graph::new();
    let b = Binder::new(&g, &store);
    let got = g.value(block.forward(&b, g.input(x.clone())).unwrap());

    let g = Graph::new();
    let xin = g.input(x);
    // Upper path: three residual blocks into a rate-4 dilated conv.
    let mut t = xin;
    for i in 0..3 {
        t = residual_by_name(&g, &store, &format!("m.res4.{i}"), t, c);
    }
    let out1 = conv_by_name(&g, &store, "m.dil4", t, &ConvSpec::same(c, c, 3, 4));
    // Middle path: two residual blocks into rate 2.
    let mut t = xin;
    for i in 0..2 {
        t = residual_by_name(&g, &store, &format!("m.res2.{i}"), t, c);
    }
    let out2 = conv_by_name(&g, &store, "m.dil2", t, &ConvSpec::same(c, c, 3, 2));
    // Lower path: one residual block into rate 1.
    let t = residual_by_name(&g, &store, "m.res1", xin, c);
    let out3 = conv_by_name(&g, &store, "m.dil1", t, &ConvSpec::same(c, c, 3, 1));
    // Nested concat-fuse, then the residual output projection.
    let fuse_spec = ConvSpec::new(2 * c, c, (1, 1));
    let mix = g
        .relu(conv_by_name(&g, &store, "m.fuse12", g.concat_channels(out1, out2).unwrap(), &fuse_spec))
        .unwrap();
    let mix = g
        .relu(conv_by_name(&g, &store, "m.fuse123", g.concat_channels(mix, out3).unwrap(), &fuse_spec))
        .unwrap();
    let proj = g
        .relu(conv_by_name(&g, &store, "m.out", mix, &ConvSpec::new(c, c, (1, 1))))
        .unwrap();
    let expected = g.value(g.add(xin, proj).unwrap());

    assert_eq!(got.data(), expected.data());
}

#[test]
fn mscfa_gradients_match_finite_differences() {
    let (block, store) = build(7, |s, r| Mscfa::init(s, r, "m", 4));
    let mut r = rng(8);
    let x = rand_tensor(&mut r, Shape::new(1, 4, 6, 6), -1.0, 1.0);
    check_param_grads("mscfa", &store, &GradTol::block(), |b| {
        let y = block.forward(b, b.graph().input(x.clone())).unwrap();
        b.graph().sum(y).unwrap()
    });
}

// ---- LFA --------------------------------------------------------------

fn lfa_4x8(seed: u64, c: usize, hw: (usize, usize)) -> (Lfa, ParameterStore<f64>) {
    build(seed, |s, r| {
        Lfa::init(s, r, "l", c, [4, 8, 4, 8], hw).unwrap()
    })
}

#[test]
fn lfa_patch_grid_matches_ceiling_rule() {
    // A 32-wide map with ratio 8 splits into ceil(32/8) = 4 tiles per side.
    let g: Graph<f64> = Graph::new();
    let x = g.input(Tensor::zeros(Shape::new(1, 2, 32, 32)));
    let tiles = g.space_to_patches(x, 8).unwrap();
    assert_eq!(g.shape(tiles).n, 4 * 4);
}

#[test]
fn lfa_zero_params_outputs_zero() {
    let (block, mut store) = lfa_4x8(9, 4, (16, 16));
    store.zero_all();
    let mut r = rng(10);
    let x = rand_tensor(&mut r, Shape::new(1, 4, 16, 16), -1.0, 1.0);
    let g = Graph::new();
    let b = Binder::new(&g, &store);
    let y = block.forward(&b, g.input(x)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn lfa_rejects_oversized_ratio_at_build_time() {
    let mut store = ParameterStore::<f64>::new();
    let mut r = rng(11);
    let err = match Lfa::init(&mut store, &mut r, "l", 4, [4, 8, 16, 64], (16, 16)) {
        Err(e) => e,
        Ok(_) => panic!("oversized ratio must be rejected"),
    };
    assert!(err.to_string().contains("patch ratio"), "got: {err}");
}

/// Center-one 3x3 kernels and identity 1x1 kernels turn a branch into the
/// identity on non-negative input, ragged crop included.
#[test]
fn lfa_branch_identity_kernels_reassemble_exactly() {
    let c = 3;
    let (block, mut store) = build(12, |s, r| {
        Lfa::init(s, r, "l", c.max(4), [4, 8, 4, 8], (10, 14)).unwrap()
    });
    let c = 4;
    // Branch 0 (ratio 4): conv3 = center-one identity, conv1 = identity.
    let mut w3 = vec![0.0; c * c * 9];
    let mut w1 = vec![0.0; c * c];
    for ch in 0..c {
        w3[((ch * c + ch) * 3 + 1) * 3 + 1] = 1.0;
        w1[ch * c + ch] = 1.0;
    }
    store.set("l.p0.c3.w", Tensor::new(Shape::new(c, c, 3, 3), w3).unwrap()).unwrap();
    store.set("l.p0.c3.b", Tensor::zeros(Shape::new(c, 1, 1, 1))).unwrap();
    store.set("l.p0.c1.w", Tensor::new(Shape::new(c, c, 1, 1), w1).unwrap()).unwrap();
    store.set("l.p0.c1.b", Tensor::zeros(Shape::new(c, 1, 1, 1))).unwrap();

    let mut r = rng(13);
    // 10x14 is ragged for ratio 4: tiles are zero-padded then cropped back.
    let o = rand_tensor(&mut r, Shape::new(1, c, 10, 14), 0.0, 1.0);
    let g = Graph::new();
    let b = Binder::new(&g, &store);
    let y = block.branch_forward(&b, g.input(o.clone()), 0).unwrap();
    assert_eq!(g.value(y).data(), o.data());
}

/// Before the four-way fusion, a branch is local: perturbing one pixel only
/// moves values inside that pixel's patch.
#[test]
fn lfa_branch_is_patch_local() {
    let c = 4;
    let (block, store) = lfa_4x8(14, c, (16, 16));
    let mut r = rng(15);
    let base = rand_tensor(&mut r, Shape::new(1, c, 16, 16), -1.0, 1.0);
    // Perturb pixel (y=5, x=9): for ratio 4 that is patch row 1, col 2.
    let shape = base.shape();
    let poked = base.with_value_at(shape.offset(0, 1, 5, 9), 3.0);

    let g = Graph::new();
    let b = Binder::new(&g, &store);
    let ya = g.value(block.branch_forward(&b, g.input(base), 0).unwrap());
    let yb = g.value(block.branch_forward(&b, g.input(poked), 0).unwrap());

    let ratio = block.branch_ratio(0);
    assert_eq!(ratio, 4);
    for ch in 0..c {
        for y in 0..16 {
            for x in 0..16 {
                let inside = (y / ratio == 5 / ratio) && (x / ratio == 9 / ratio);
                let (a, b_) = (ya.at(0, ch, y, x), yb.at(0, ch, y, x));
                if !inside {
                    assert_eq!(a, b_, "leak at c{ch} y{y} x{x}");
                }
            }
        }
    }
    assert_ne!(ya.data(), yb.data(), "the perturbation must show up somewhere");
}

/// Straight-line recomputation of gate + patch branches + fusion.
#[test]
fn lfa_matches_straight_line_composition() {
    let c = 4;
    let (block, store) = lfa_4x8(16, c, (12, 12));
    let mut r = rng(17);
    let x = rand_tensor(&mut r, Shape::new(1, c, 12, 12), -1.0, 1.0);

    let g = Graph::new();
    let b = Binder::new(&g, &store);
    let got = g.value(block.forward(&b, g.input(x.clone())).unwrap());

    let g = Graph::new();
    let xin = g.input(x);
    // Gate: squeeze, two-matrix gating, channel rescale.
    let z = g.global_avg_pool(xin).unwrap();
    let h = g
        .relu(conv_by_name(&g, &store, "l.se.w1", z, &ConvSpec::new(c, c / 2, (1, 1))))
        .unwrap();
    let s = g
        .sigmoid(conv_by_name(&g, &store, "l.se.w2", h, &ConvSpec::new(c / 2, c, (1, 1))))
        .unwrap();
    let gated = g.channel_scale(xin, s).unwrap();
    // Four patch branches at ratios [4, 8, 4, 8].
    let branch = |i: usize, p: usize| -> Var {
        let tiles = g.space_to_patches(gated, p).unwrap();
        let t = conv_by_name(&g, &store, &format!("l.p{i}.c3"), tiles, &ConvSpec::same(c, c, 3, 1));
        let plane = g.patches_to_space(t, p, Shape::new(1, c, 12, 12)).unwrap();
        g.relu(conv_by_name(&g, &store, &format!("l.p{i}.c1"), plane, &ConvSpec::new(c, c, (1, 1))))
            .unwrap()
    };
    let (o1, o2, o3, o4) = (branch(0, 4), branch(1, 8), branch(2, 4), branch(3, 8));
    let cat = g
        .concat_channels(g.concat_channels(o1, o2).unwrap(), g.concat_channels(o3, o4).unwrap())
        .unwrap();
    let expected = g
        .relu(conv_by_name(&g, &store, "l.fuse", cat, &ConvSpec::new(4 * c, c, (1, 1))))
        .unwrap();

    assert_eq!(got.data(), g.value(expected).data());
}

#[test]
fn lfa_gradients_match_finite_differences() {
    let (block, store) = lfa_4x8(18, 4, (8, 8));
    let mut r = rng(19);
    let x = rand_tensor(&mut r, Shape::new(1, 4, 8, 8), -1.0, 1.0);
    check_param_grads("lfa", &store, &GradTol::block(), |b| {
        let y = block.forward(b, b.graph().input(x.clone())).unwrap();
        b.graph().sum(y).unwrap()
    });
}

// ---- FRFB -------------------------------------------------------------

#[test]
fn frfb_zero_params_outputs_zero() {
    let (block, mut store) = build(20, |s, r| Frfb::init(s, r, "f", 4).unwrap());
    store.zero_all();
    let mut r = rng(21);
    let low = rand_tensor(&mut r, Shape::new(1, 4, 8, 8), -1.0, 1.0);
    let deep = rand_tensor(&mut r, Shape::new(1, 8, 4, 4), -1.0, 1.0);
    let g = Graph::new();
    let b = Binder::new(&g, &store);
    let y = block
        .forward(&b, g.input(low), g.input(deep))
        .unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn frfb_shape_contract() {
    let (block, store) = build(22, |s, r| Frfb::init(s, r, "f", 64).unwrap());
    let g = Graph::new();
    let b = Binder::new(&g, &store);
    let low = g.input(Tensor::zeros(Shape::new(1, 64, 64, 64)));
    let deep = g.input(Tensor::zeros(Shape::new(1, 128, 32, 32)));
    let y = block.forward(&b, low, deep).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 64, 64, 64));
}

#[test]
fn frfb_names_the_wrong_input() {
    let (block, store) = build(23, |s, r| Frfb::init(s, r, "f", 4).unwrap());
    let g = Graph::new();
    let b = Binder::new(&g, &store);
    let low = g.input(Tensor::zeros(Shape::new(1, 4, 8, 8)));
    let bad_channels = g.input(Tensor::zeros(Shape::new(1, 6, 4, 4)));
    let err = block.forward(&b, low, bad_channels).unwrap_err();
    assert!(err.to_string().contains("deep input"), "got: {err}");

    let bad_spatial = g.input(Tensor::zeros(Shape::new(1, 8, 8, 8)));
    let err = block.forward(&b, low, bad_spatial).unwrap_err();
    assert!(err.to_string().contains("deep input"), "got: {err}");
}

/// Zeroing only the deep-path reduction kills Deep2, and the multiplicative
/// structure then zeroes the whole output no matter the other parameters.
#[test]
fn frfb_output_is_zero_when_deep2_is_zero() {
    let (block, mut store) = build(24, |s, r| Frfb::init(s, r, "f", 4).unwrap());
    store.set("f.reduce.w", Tensor::zeros(Shape::new(4, 8, 1, 1))).unwrap();
    store.set("f.reduce.b", Tensor::zeros(Shape::new(4, 1, 1, 1))).unwrap();
    let mut r = rng(25);
    let low = rand_tensor(&mut r, Shape::new(1, 4, 8, 8), -1.0, 1.0);
    let deep = rand_tensor(&mut r, Shape::new(1, 8, 4, 4), -1.0, 1.0);
    let g = Graph::new();
    let b = Binder::new(&g, &store);
    let y = block.forward(&b, g.input(low), g.input(deep)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

/// Straight-line recomputation of the gated three-factor product.
#[test]
fn frfb_matches_straight_line_composition() {
    let c = 4;
    let (block, store) = build(26, |s, r| Frfb::init(s, r, "f", c).unwrap());
    let mut r = rng(27);
    let low_t = rand_tensor(&mut r, Shape::new(1, c, 8, 8), -1.0, 1.0);
    let deep_t = rand_tensor(&mut r, Shape::new(1, 2 * c, 4, 4), -1.0, 1.0);

    let g = Graph::new();
    let b = Binder::new(&g, &store);
    let got = g.value(
        block
            .forward(&b, g.input(low_t.clone()), g.input(deep_t.clone()))
            .unwrap(),
    );

    let g = Graph::new();
    let low = g.input(low_t);
    let deep = g.input(deep_t);
    // Deep path: upsample, reduce 2C->C, relu.
    let deep_up = g.upsample2x(deep, UpsampleMode::Bilinear).unwrap();
    let deep_r = g
        .relu(conv_by_name(&g, &store, "f.reduce", deep_up, &ConvSpec::new(2 * c, c, (1, 1))))
        .unwrap();
    // Low path: residual block, spatial attention, squeeze-gate to a vector.
    let refined = residual_by_name(&g, &store, "f.res", low, c);
    let mid = c / 4;
    let t = conv_by_name(&g, &store, "f.esa.reduce", refined, &ConvSpec::new(c, mid, (1, 1)));
    let t = conv_by_name(&g, &store, "f.esa.down", t, &ConvSpec::same(mid, mid, 3, 1).with_stride(2));
    let t = conv_by_name(&g, &store, "f.esa.ref1", t, &ConvSpec::same(mid, mid, 3, 1));
    let t = conv_by_name(&g, &store, "f.esa.ref2", t, &ConvSpec::same(mid, mid, 3, 1));
    let t = g.upsample2x(t, UpsampleMode::Bilinear).unwrap();
    let mask = g
        .sigmoid(conv_by_name(&g, &store, "f.esa.restore", t, &ConvSpec::new(mid, c, (1, 1))))
        .unwrap();
    let esa_out = g.mul(refined, mask).unwrap();
    let z = g.global_avg_pool(esa_out).unwrap();
    let h = g
        .relu(conv_by_name(&g, &store, "f.gate.w1", z, &ConvSpec::new(c, c / 2, (1, 1))))
        .unwrap();
    let low1 = g
        .sigmoid(conv_by_name(&g, &store, "f.gate.w2", h, &ConvSpec::new(c / 2, c, (1, 1))))
        .unwrap();
    // Fusion: (low + deep'), SE-rescaled deep', and the channel vector.
    let fu = g.add(low, deep_r).unwrap();
    let z2 = g.global_avg_pool(deep_r).unwrap();
    let h2 = g
        .relu(conv_by_name(&g, &store, "f.se.w1", z2, &ConvSpec::new(c, c / 2, (1, 1))))
        .unwrap();
    let s2 = g
        .sigmoid(conv_by_name(&g, &store, "f.se.w2", h2, &ConvSpec::new(c / 2, c, (1, 1))))
        .unwrap();
    let deep2 = g.channel_scale(deep_r, s2).unwrap();
    let expected = g.mul(g.channel_scale(fu, low1).unwrap(), deep2).unwrap();

    assert_eq!(got.data(), g.value(expected).data());
}

#[test]
fn frfb_gradients_match_finite_differences() {
    let (block, store) = build(28, |s, r| Frfb::init(s, r, "f", 4).unwrap());
    let mut r = rng(29);
    let low = rand_tensor(&mut r, Shape::new(1, 4, 8, 8), -1.0, 1.0);
    let deep = rand_tensor(&mut r, Shape::new(1, 8, 4, 4), -1.0, 1.0);
    check_param_grads("frfb", &store, &GradTol::block(), |b| {
        let y = block
            .forward(b, b.graph().input(low.clone()), b.graph().input(deep.clone()))
            .unwrap();
        b.graph().sum(y).unwrap()
    });
}
