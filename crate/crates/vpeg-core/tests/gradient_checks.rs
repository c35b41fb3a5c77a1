//! Finite-difference verification of every differentiable op, on randomized
//! shapes and values, plus a three-layer network end to end.

use rand_chacha::ChaCha8Rng;
use vpeg_core::graph::{Axis, NodeId, Tape};
use vpeg_core::oracle::{fd_param_grads, max_rel_err};
use vpeg_core::params::{bind, harvest, ParamSet};
use vpeg_core::rng::{below, stream, uniform, Domain};
use vpeg_core::tensor::Tensor;

const FD_H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| uniform(rng, lo, hi)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Build a scalar from `x` through the op under test, then a fixed readout
/// so the upstream gradient is non-uniform.
fn scalarize(tape: &mut Tape, out: NodeId) -> NodeId {
    let v = tape.value(out).clone();
    let weights = Tensor::from_vec(
        v.rows(),
        v.cols(),
        (0..v.numel()).map(|i| 0.3 + 0.1 * i as f64).collect(),
    );
    let w = tape.constant(weights);
    let prod = tape.mul(out, w).expect("same shape");
    tape.sum(prod)
}

/// Check one op against finite differences for `cases` random instances.
fn check_op(
    name: &str,
    cases: usize,
    seed: u64,
    lo: f64,
    hi: f64,
    build: impl Fn(&mut Tape, NodeId, &mut ChaCha8Rng) -> NodeId,
) {
    let mut rng = stream(seed, Domain::ParamInit, 0);
    for case in 0..cases {
        let rows = 1 + below(&mut rng, 4);
        let cols = 1 + below(&mut rng, 5);
        let x = random_tensor(&mut rng, rows, cols, lo, hi);
        let mut params = ParamSet::new();
        params.insert("x", x);

        let eval_rng = rng.clone();
        let analytic = {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params, true);
            let xn = bound.node("x");
            let mut op_rng = eval_rng.clone();
            let out = build(&mut tape, xn, &mut op_rng);
            let loss = scalarize(&mut tape, out);
            tape.backward(loss).unwrap();
            harvest(&tape, &bound, &mut params);
            let g = params.get("x").grad.clone();
            params.zero_grads();
            vec![("x".to_string(), g)]
        };
        let fd = fd_param_grads(&params, FD_H, |p| {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, p, false);
            let xn = bound.node("x");
            let mut op_rng = eval_rng.clone();
            let out = build(&mut tape, xn, &mut op_rng);
            let loss = scalarize(&mut tape, out);
            tape.value(loss).item()
        });
        let err = max_rel_err(&analytic, &fd);
        assert!(
            err <= REL_TOL,
            "{name} case {case}: max rel err {err:.3e} exceeds {REL_TOL:.0e}"
        );
        // keep the shape stream moving
        let _ = eval_rng.clone();
    }
}

#[test]
fn fd_elementwise_ops() {
    check_op("tanh", 100, 101, -2.0, 2.0, |t, x, _| t.tanh(x));
    check_op("sigmoid", 100, 102, -3.0, 3.0, |t, x, _| t.sigmoid(x));
    check_op("exp", 100, 103, -1.5, 1.5, |t, x, _| t.exp(x));
    check_op("log", 100, 104, 0.2, 3.0, |t, x, _| t.log(x));
    check_op("sqrt", 100, 105, 0.3, 4.0, |t, x, _| t.sqrt(x));
    // keep values away from the kink at zero
    check_op("relu", 100, 106, 0.05, 2.0, |t, x, _| t.relu(x));
    check_op("relu_neg", 100, 107, -2.0, -0.05, |t, x, _| t.relu(x));
    check_op("scale", 100, 108, -2.0, 2.0, |t, x, _| t.scale(x, -1.7));
    check_op("add_scalar", 100, 109, -2.0, 2.0, |t, x, _| {
        t.add_scalar(x, 0.9)
    });
}

#[test]
fn fd_binary_ops() {
    check_op("add", 100, 201, -2.0, 2.0, |t, x, rng| {
        let (r, c) = t.value(x).shape();
        let other = t.constant(random_tensor(rng, r, c, -2.0, 2.0));
        t.add(x, other).unwrap()
    });
    check_op("sub", 100, 202, -2.0, 2.0, |t, x, rng| {
        let (r, c) = t.value(x).shape();
        let other = t.constant(random_tensor(rng, r, c, -2.0, 2.0));
        t.sub(x, other).unwrap()
    });
    check_op("mul", 100, 203, -2.0, 2.0, |t, x, rng| {
        let (r, c) = t.value(x).shape();
        let other = t.constant(random_tensor(rng, r, c, -2.0, 2.0));
        t.mul(x, other).unwrap()
    });
    check_op("div", 100, 204, -2.0, 2.0, |t, x, rng| {
        let (r, c) = t.value(x).shape();
        let other = t.constant(random_tensor(rng, r, c, 0.5, 2.5));
        t.div(x, other).unwrap()
    });
    // both sides of div differentiable
    check_op("div_denominator", 100, 205, 0.5, 2.5, |t, x, rng| {
        let (r, c) = t.value(x).shape();
        let num = t.constant(random_tensor(rng, r, c, -2.0, 2.0));
        t.div(num, x).unwrap()
    });
    check_op("matmul_left", 100, 206, -1.5, 1.5, |t, x, rng| {
        let c = t.value(x).cols();
        let other = t.constant(random_tensor(rng, c, 3, -1.5, 1.5));
        t.matmul(x, other).unwrap()
    });
    check_op("matmul_right", 100, 207, -1.5, 1.5, |t, x, rng| {
        let r = t.value(x).rows();
        let other = t.constant(random_tensor(rng, 3, r, -1.5, 1.5));
        t.matmul(other, x).unwrap()
    });
}

#[test]
fn fd_reductions_and_structure() {
    check_op("mean_rows", 100, 301, -2.0, 2.0, |t, x, _| {
        t.mean_axis(x, Axis::Rows)
    });
    check_op("mean_cols", 100, 302, -2.0, 2.0, |t, x, _| {
        t.mean_axis(x, Axis::Cols)
    });
    check_op("var_rows", 100, 303, -2.0, 2.0, |t, x, _| {
        t.var_axis(x, Axis::Rows)
    });
    check_op("var_cols", 100, 304, -2.0, 2.0, |t, x, _| {
        t.var_axis(x, Axis::Cols)
    });
    check_op("sum", 100, 305, -2.0, 2.0, |t, x, _| t.sum(x));
    check_op("sq_norm", 100, 306, -2.0, 2.0, |t, x, _| t.sq_norm(x));
    check_op("concat_rows", 100, 307, -2.0, 2.0, |t, x, rng| {
        let c = t.value(x).cols();
        let other = t.constant(random_tensor(rng, 2, c, -2.0, 2.0));
        t.concat(&[x, other, x], Axis::Rows).unwrap()
    });
    check_op("concat_cols", 100, 308, -2.0, 2.0, |t, x, rng| {
        let r = t.value(x).rows();
        let other = t.constant(random_tensor(rng, r, 2, -2.0, 2.0));
        t.concat(&[other, x], Axis::Cols).unwrap()
    });
    check_op("slice_rows", 100, 309, -2.0, 2.0, |t, x, _| {
        let r = t.value(x).rows();
        t.slice(x, Axis::Rows, 0, r.div_ceil(2)).unwrap()
    });
    check_op("slice_cols", 100, 310, -2.0, 2.0, |t, x, _| {
        let c = t.value(x).cols();
        t.slice(x, Axis::Cols, c / 2, c).unwrap()
    });
    check_op("reshape", 100, 311, -2.0, 2.0, |t, x, _| {
        let (r, c) = t.value(x).shape();
        t.reshape(x, r * c, 1).unwrap()
    });
}

/// Three-layer tanh network: full parameter gradient against central
/// differences with h = 1e-5, relative tolerance 1e-4.
#[test]
fn fd_three_layer_network() {
    for seed in 0..5u64 {
        let mut rng = stream(400 + seed, Domain::ParamInit, 0);
        let mut params = ParamSet::new();
        let mlp = vpeg_core::layers::Mlp::init(&mut params, "net", &[4, 8, 8, 2], &mut rng);
        let x = random_tensor(&mut rng, 1, 4, -1.0, 1.0);
        let target = random_tensor(&mut rng, 1, 2, -1.0, 1.0);

        let loss_of = |p: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, p, false);
            let xn = tape.constant(x.clone());
            let out = mlp.forward(&mut tape, &bound, xn).unwrap();
            let tn = tape.constant(target.clone());
            let diff = tape.sub(out, tn).unwrap();
            let l = tape.sq_norm(diff);
            tape.value(l).item()
        };

        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, true);
        let xn = tape.constant(x.clone());
        let out = mlp.forward(&mut tape, &bound, xn).unwrap();
        let tn = tape.constant(target.clone());
        let diff = tape.sub(out, tn).unwrap();
        let l = tape.sq_norm(diff);
        tape.backward(l).unwrap();
        harvest(&tape, &bound, &mut params);

        let analytic: Vec<(String, Tensor)> = params
            .iter()
            .map(|(n, p)| (n.to_string(), p.grad.clone()))
            .collect();
        let mut probe = params.clone();
        probe.zero_grads();
        let fd = fd_param_grads(&probe, FD_H, loss_of);
        let err = max_rel_err(&analytic, &fd);
        assert!(err <= REL_TOL, "net seed {seed}: max rel err {err:.3e}");
    }
}

/// GRU step gradients, since the recurrent cell composes many ops.
#[test]
fn fd_gru_step() {
    let mut rng = stream(500, Domain::ParamInit, 0);
    let mut params = ParamSet::new();
    let gru = vpeg_core::layers::GruCell::init(&mut params, "g", 3, 5, &mut rng);
    let x = random_tensor(&mut rng, 2, 3, -1.0, 1.0);
    let h0 = random_tensor(&mut rng, 2, 5, -0.5, 0.5);

    let loss_of = |p: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, p, false);
        let xn = tape.constant(x.clone());
        let hn = tape.constant(h0.clone());
        let h1 = gru.step(&mut tape, &bound, xn, hn).unwrap();
        let h2 = gru.step(&mut tape, &bound, xn, h1).unwrap();
        let l = tape.sq_norm(h2);
        tape.value(l).item()
    };

    let mut tape = Tape::new();
    let bound = bind(&mut tape, &params, true);
    let xn = tape.constant(x.clone());
    let hn = tape.constant(h0.clone());
    let h1 = gru.step(&mut tape, &bound, xn, hn).unwrap();
    let h2 = gru.step(&mut tape, &bound, xn, h1).unwrap();
    let l = tape.sq_norm(h2);
    tape.backward(l).unwrap();
    harvest(&tape, &bound, &mut params);

    let analytic: Vec<(String, Tensor)> = params
        .iter()
        .map(|(n, p)| (n.to_string(), p.grad.clone()))
        .collect();
    let mut probe = params.clone();
    probe.zero_grads();
    let fd = fd_param_grads(&probe, FD_H, loss_of);
    let err = max_rel_err(&analytic, &fd);
    assert!(err <= REL_TOL, "gru: max rel err {err:.3e}");
}
