//! Central finite-difference checks for every differentiable op, run in f64.

mod common;

use common::{check_grads, rand_binary, rand_tensor, rng, GradTol};
use dmads_core::{ConvSpec, Graph, Shape, Tensor, UpsampleMode, Var};
use rand::Rng;

/// Scalar probe loss: weighted sum against a fixed random projection so that
/// no gradient component can hide behind symmetric cancellation.
fn probe(g: &Graph<f64>, y: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = rand_tensor(&mut r, g.shape(y), -1.0, 1.0);
    let wv = g.input(w);
    g.sum(g.mul(y, wv).unwrap()).unwrap()
}

#[test]
fn relu_gradcheck() {
    let mut r = rng(1);
    // Keep values away from the kink at zero.
    let x = Tensor::from_fn(Shape::new(1, 2, 3, 3), |_| {
        let v: f64 = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    check_grads("relu", &[x], &GradTol::op(), |g, vars| {
        probe(g, g.relu(vars[0]).unwrap(), 10)
    });
}

#[test]
fn sigmoid_gradcheck() {
    let mut r = rng(2);
    let x = rand_tensor(&mut r, Shape::new(1, 2, 3, 3), -3.0, 3.0);
    check_grads("sigmoid", &[x], &GradTol::op(), |g, vars| {
        probe(g, g.sigmoid(vars[0]).unwrap(), 11)
    });
}

#[test]
fn add_mul_gradcheck() {
    let mut r = rng(3);
    let a = rand_tensor(&mut r, Shape::new(1, 2, 2, 3), -1.0, 1.0);
    let b = rand_tensor(&mut r, Shape::new(1, 2, 2, 3), -1.0, 1.0);
    check_grads("add", &[a.clone(), b.clone()], &GradTol::op(), |g, vars| {
        probe(g, g.add(vars[0], vars[1]).unwrap(), 12)
    });
    check_grads("mul", &[a, b], &GradTol::op(), |g, vars| {
        probe(g, g.mul(vars[0], vars[1]).unwrap(), 13)
    });
}

#[test]
fn channel_scale_gradcheck_both_arguments() {
    let mut r = rng(4);
    let x = rand_tensor(&mut r, Shape::new(2, 3, 4, 4), -1.0, 1.0);
    let s = rand_tensor(&mut r, Shape::new(2, 3, 1, 1), -1.0, 1.0);
    check_grads("channel_scale", &[x, s], &GradTol::op(), |g, vars| {
        probe(g, g.channel_scale(vars[0], vars[1]).unwrap(), 14)
    });
}

#[test]
fn concat_and_slice_gradcheck() {
    let mut r = rng(5);
    let a = rand_tensor(&mut r, Shape::new(1, 2, 3, 3), -1.0, 1.0);
    let b = rand_tensor(&mut r, Shape::new(1, 3, 3, 3), -1.0, 1.0);
    check_grads("concat_channels", &[a, b], &GradTol::op(), |g, vars| {
        let cat = g.concat_channels(vars[0], vars[1]).unwrap();
        let sliced = g.slice_channels(cat, 1, 3).unwrap();
        probe(g, sliced, 15)
    });
}

#[test]
fn upsample_gradcheck_both_modes() {
    let mut r = rng(6);
    let x = rand_tensor(&mut r, Shape::new(1, 2, 3, 4), -1.0, 1.0);
    for (mode, name) in [
        (UpsampleMode::Nearest, "upsample2x nearest"),
        (UpsampleMode::Bilinear, "upsample2x bilinear"),
    ] {
        check_grads(name, &[x.clone()], &GradTol::op(), |g, vars| {
            probe(g, g.upsample2x(vars[0], mode).unwrap(), 16)
        });
    }
}

#[test]
fn global_avg_pool_gradcheck() {
    let mut r = rng(7);
    let x = rand_tensor(&mut r, Shape::new(2, 3, 4, 4), -1.0, 1.0);
    check_grads("global_avg_pool", &[x], &GradTol::op(), |g, vars| {
        probe(g, g.global_avg_pool(vars[0]).unwrap(), 17)
    });
}

#[test]
fn patch_ops_gradcheck() {
    let mut r = rng(8);
    let x = rand_tensor(&mut r, Shape::new(1, 2, 5, 6), -1.0, 1.0);
    let orig = x.shape();
    check_grads("space/patches roundtrip", &[x], &GradTol::op(), |g, vars| {
        let tiles = g.space_to_patches(vars[0], 4).unwrap();
        let act = g.sigmoid(tiles).unwrap();
        let back = g.patches_to_space(act, 4, orig).unwrap();
        probe(g, back, 18)
    });
}

#[test]
fn scale_and_sum_gradcheck() {
    let mut r = rng(9);
    let x = rand_tensor(&mut r, Shape::new(1, 1, 3, 3), -1.0, 1.0);
    check_grads("scale+sum", &[x], &GradTol::op(), |g, vars| {
        g.sum(g.scale(vars[0], -2.5).unwrap()).unwrap()
    });
}

#[test]
fn conv2d_gradcheck_geometries() {
    let mut r = rng(10);
    let cases = [
        (ConvSpec::new(2, 3, (3, 3)).with_padding(1), Shape::new(1, 2, 5, 5)),
        (
            ConvSpec::new(2, 2, (3, 3)).with_stride(2).with_padding(1),
            Shape::new(1, 2, 6, 6),
        ),
        (
            ConvSpec::new(2, 2, (3, 3)).with_padding(2).with_dilation(2),
            Shape::new(1, 2, 6, 6),
        ),
        (ConvSpec::new(3, 2, (1, 1)), Shape::new(2, 3, 4, 4)),
    ];
    for (i, (spec, shape)) in cases.iter().enumerate() {
        let x = rand_tensor(&mut r, *shape, -1.0, 1.0);
        let w = rand_tensor(&mut r, spec.weight_shape(), -0.5, 0.5);
        let b = rand_tensor(&mut r, Shape::new(spec.out_channels, 1, 1, 1), -0.5, 0.5);
        check_grads(
            &format!("conv2d case {i}"),
            &[x, w, b],
            &GradTol::op(),
            |g, vars| {
                let y = g.conv2d(vars[0], vars[1], Some(vars[2]), spec).unwrap();
                probe(g, y, 19 + i as u64)
            },
        );
    }
}

#[test]
fn conv_sigmoid_chain_gradcheck() {
    // Spec'd composite: conv2d chained with sigmoid on a 1x2x6x6 input.
    let mut r = rng(11);
    let spec = ConvSpec::new(2, 2, (3, 3)).with_padding(1);
    let x = rand_tensor(&mut r, Shape::new(1, 2, 6, 6), -1.0, 1.0);
    let w = rand_tensor(&mut r, spec.weight_shape(), -0.5, 0.5);
    let b = rand_tensor(&mut r, Shape::new(2, 1, 1, 1), -0.5, 0.5);
    check_grads("conv2d+sigmoid", &[x, w, b], &GradTol::op(), |g, vars| {
        let y = g.conv2d(vars[0], vars[1], Some(vars[2]), &spec).unwrap();
        probe(g, g.sigmoid(y).unwrap(), 30)
    });
}

#[test]
fn bce_with_logits_gradcheck() {
    let mut r = rng(12);
    let logits = rand_tensor(&mut r, Shape::new(1, 1, 4, 4), -2.5, 2.5);
    let target = rand_binary(&mut r, Shape::new(1, 1, 4, 4), 0.5);
    check_grads("bce_with_logits", &[logits], &GradTol::op(), |g, vars| {
        g.bce_with_logits(vars[0], &target).unwrap()
    });
}

#[test]
fn soft_iou_loss_gradcheck() {
    let mut r = rng(13);
    let logits = rand_tensor(&mut r, Shape::new(1, 1, 4, 4), -2.5, 2.5);
    let target = rand_binary(&mut r, Shape::new(1, 1, 4, 4), 0.4);
    check_grads("soft_iou_loss", &[logits], &GradTol::op(), |g, vars| {
        g.soft_iou_loss(vars[0], &target).unwrap()
    });
}
