//! Shared helpers for the integration tests: deterministic random tensors and
//! a central finite-difference gradient checker.

#![allow(dead_code)]

use dmads_core::{Graph, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn rand_tensor_f32(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi) as f32)
}

/// Binary 0/1 tensor with roughly `p` positive fraction.
pub fn rand_binary(rng: &mut ChaCha8Rng, shape: Shape, p: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

/// `|a - b|` relative to the larger magnitude, floored at 1 so values near
/// zero are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub struct GradTol {
    pub eps: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Coordinates sampled per input tensor (all coordinates when the tensor
    /// is at most this large).
    pub max_coords: usize,
}

impl GradTol {
    /// Per-op tolerance: relative error <= 1e-6 at eps = 1e-4 in f64.
    pub fn op() -> Self {
        GradTol {
            eps: 1e-4,
            rtol: 1e-6,
            atol: 1e-8,
            max_coords: 48,
        }
    }

    /// End-to-end block tolerance: relative error <= 1e-5. The probe step is
    /// smaller than the per-op one: deep relu stacks put kinks everywhere,
    /// and a 1e-4 step crosses them often enough to poison the quotient.
    pub fn block() -> Self {
        GradTol {
            eps: 1e-5,
            rtol: 1e-5,
            atol: 1e-7,
            max_coords: 24,
        }
    }
}

/// Gradient-check every parameter of a store through `forward` (which builds
/// a scalar loss from a pre-bound [`Binder`]).
pub fn check_param_grads(
    name: &str,
    store: &dmads_core::ParameterStore<f64>,
    tol: &GradTol,
    forward: impl Fn(&dmads_core::Binder<f64>) -> Var,
) {
    check_param_grads_filtered(name, store, tol, |_| true, forward);
}

/// As [`check_param_grads`] but only probing parameters whose name passes
/// `filter`; the rest still feed the forward pass from the store.
pub fn check_param_grads_filtered(
    name: &str,
    store: &dmads_core::ParameterStore<f64>,
    tol: &GradTol,
    filter: impl Fn(&str) -> bool,
    forward: impl Fn(&dmads_core::Binder<f64>) -> Var,
) {
    let names: Vec<String> = store.names().filter(|n| filter(n)).cloned().collect();
    let tensors: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| store.get(n).unwrap().clone())
        .collect();
    assert!(!names.is_empty(), "{name}: filter selected no parameters");
    check_grads(name, &tensors, tol, |g, vars| {
        let binder = dmads_core::Binder::new(g, store);
        for (pname, var) in names.iter().zip(vars) {
            binder.bind(pname, *var);
        }
        forward(&binder)
    });
}

/// Check analytic gradients of `build` (a scalar-valued graph over `inputs`)
/// against central finite differences, coordinate by coordinate.
///
/// The numeric side never touches the tape's backward pass: it re-runs the
/// forward closure on perturbed copies of the inputs.
pub fn check_grads(
    name: &str,
    inputs: &[Tensor<f64>],
    tol: &GradTol,
    build: impl Fn(&Graph<f64>, &[Var]) -> Var,
) {
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.input(t.clone())).collect();
        g.value(build(&g, &vars)).item()
    };

    // Analytic pass.
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&g, &vars);
    let grads = g.backward(loss).expect("backward");

    let mut pick = rng(0x5eed ^ inputs.len() as u64);
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[idx])
            .unwrap_or_else(|| panic!("{name}: input {idx} has no gradient"));
        let numel = input.shape().numel();
        let coords: Vec<usize> = if numel <= tol.max_coords {
            (0..numel).collect()
        } else {
            (0..tol.max_coords)
                .map(|_| pick.gen_range(0..numel))
                .collect()
        };
        for flat in coords {
            let base = input.data()[flat];
            let mut probe = inputs.to_vec();
            probe[idx] = input.with_value_at(flat, base + tol.eps);
            let plus = eval(&probe);
            probe[idx] = input.with_value_at(flat, base - tol.eps);
            let minus = eval(&probe);
            let numeric = (plus - minus) / (2.0 * tol.eps);
            let a = analytic.data()[flat];
            let err = (a - numeric).abs();
            let bound = tol.atol + tol.rtol * a.abs().max(numeric.abs());
            assert!(
                err <= bound,
                "{name}: input {idx} coord {flat}: analytic {a:.9e} vs numeric {numeric:.9e} \
                 (|diff| {err:.3e} > bound {bound:.3e})"
            );
        }
    }
}
