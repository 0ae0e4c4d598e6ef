//! Finite-difference oracles for every engine primitive and for full model
//! graphs, plus the jacobian and linearity invariants.

mod common;

use common::*;
use fcl_core::{rng, NodeId, Tape, Tensor};
use rand::Rng;

const POINTS: usize = 100;

#[test]
fn fd_add_sub_mul_all_broadcasts() {
    let mut r = rng::stream(11, &[1]);
    for i in 0..POINTS {
        let a = rand_tensor(&mut r, &[2, 3], -2.0, 2.0);
        let b = rand_tensor(&mut r, &[2, 3], -2.0, 2.0);
        let s = rand_tensor(&mut r, &[], 0.5, 2.0);
        let chan = rand_tensor(&mut r, &[2], -1.0, 1.0);
        let cube = rand_tensor(&mut r, &[2, 2, 2], -1.0, 1.0);
        let probe6 = rand_probe(&mut r, 6);
        let probe8 = rand_probe(&mut r, 8);

        let op = i % 3;
        fd_gradcheck("same-shape", &[a.clone(), b], &|tape, ids| {
            let y = match op {
                0 => tape.add(ids[0], ids[1]).unwrap(),
                1 => tape.sub(ids[0], ids[1]).unwrap(),
                _ => tape.mul(ids[0], ids[1]).unwrap(),
            };
            scalarize(tape, y, &probe6)
        });
        fd_gradcheck("scalar-broadcast", &[a.clone(), s.clone()], &|tape, ids| {
            let y = match op {
                0 => tape.add(ids[0], ids[1]).unwrap(),
                1 => tape.sub(ids[0], ids[1]).unwrap(),
                _ => tape.mul(ids[0], ids[1]).unwrap(),
            };
            scalarize(tape, y, &probe6)
        });
        fd_gradcheck("scalar-left", &[s, a], &|tape, ids| {
            let y = match op {
                0 => tape.add(ids[0], ids[1]).unwrap(),
                1 => tape.sub(ids[0], ids[1]).unwrap(),
                _ => tape.mul(ids[0], ids[1]).unwrap(),
            };
            scalarize(tape, y, &probe6)
        });
        fd_gradcheck("channel-broadcast", &[cube, chan], &|tape, ids| {
            let y = match op {
                0 => tape.add(ids[0], ids[1]).unwrap(),
                1 => tape.sub(ids[0], ids[1]).unwrap(),
                _ => tape.mul(ids[0], ids[1]).unwrap(),
            };
            scalarize(tape, y, &probe8)
        });
    }
}

#[test]
fn fd_const_ops() {
    let mut r = rng::stream(12, &[1]);
    for _ in 0..POINTS {
        let a = rand_tensor(&mut r, &[5], -2.0, 2.0);
        let c: f64 = r.gen_range(-3.0..3.0);
        let probe = rand_probe(&mut r, 5);
        fd_gradcheck("add_scalar", &[a.clone()], &|tape, ids| {
            let y = tape.add_scalar(ids[0], c).unwrap();
            scalarize(tape, y, &probe)
        });
        fd_gradcheck("scale", &[a], &|tape, ids| {
            let y = tape.scale(ids[0], c).unwrap();
            scalarize(tape, y, &probe)
        });
    }
}

#[test]
fn fd_matmul_both_arities() {
    let mut r = rng::stream(13, &[1]);
    for _ in 0..POINTS {
        let m = rand_tensor(&mut r, &[3, 4], -1.5, 1.5);
        let v = rand_tensor(&mut r, &[4], -1.5, 1.5);
        let n = rand_tensor(&mut r, &[4, 2], -1.5, 1.5);
        let probe3 = rand_probe(&mut r, 3);
        let probe6 = rand_probe(&mut r, 6);
        fd_gradcheck("matmul-vec", &[m.clone(), v], &|tape, ids| {
            let y = tape.matmul(ids[0], ids[1]).unwrap();
            scalarize(tape, y, &probe3)
        });
        fd_gradcheck("matmul-mat", &[m, n], &|tape, ids| {
            let y = tape.matmul(ids[0], ids[1]).unwrap();
            scalarize(tape, y, &probe6)
        });
    }
}

#[test]
fn fd_conv2d_stride_one_and_two() {
    let mut r = rng::stream(14, &[1]);
    for _ in 0..POINTS / 2 {
        let x = rand_tensor(&mut r, &[2, 6, 6], -1.0, 1.0);
        let k = rand_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
        let probe_s1 = rand_probe(&mut r, 3 * 4 * 4);
        let probe_s2 = rand_probe(&mut r, 3 * 2 * 2);
        fd_gradcheck("conv2d-s1", &[x.clone(), k.clone()], &|tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], 1).unwrap();
            scalarize(tape, y, &probe_s1)
        });
        fd_gradcheck("conv2d-s2", &[x, k], &|tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], 2).unwrap();
            scalarize(tape, y, &probe_s2)
        });
    }
}

#[test]
fn fd_maxpool() {
    let mut r = rng::stream(15, &[1]);
    for _ in 0..POINTS {
        let x = rand_tensor_separated(&mut r, &[2, 4, 4], 1e-3);
        let probe = rand_probe(&mut r, 2 * 2 * 2);
        fd_gradcheck("maxpool2d", &[x], &|tape, ids| {
            let y = tape.maxpool2d(ids[0], 2).unwrap();
            scalarize(tape, y, &probe)
        });
    }
}

#[test]
fn fd_pointwise_and_reductions() {
    let mut r = rng::stream(16, &[1]);
    for _ in 0..POINTS {
        let x = rand_tensor_off_kink(&mut r, &[6], 0.05, 2.0);
        let pos = rand_tensor(&mut r, &[6], 0.3, 3.0);
        let probe = rand_probe(&mut r, 6);
        fd_gradcheck("relu", &[x.clone()], &|tape, ids| {
            let y = tape.relu(ids[0]).unwrap();
            scalarize(tape, y, &probe)
        });
        fd_gradcheck("log", &[pos.clone()], &|tape, ids| {
            let y = tape.log(ids[0]).unwrap();
            scalarize(tape, y, &probe)
        });
        fd_gradcheck("exp", &[x.clone()], &|tape, ids| {
            let y = tape.exp(ids[0]).unwrap();
            scalarize(tape, y, &probe)
        });
        fd_gradcheck("sum", &[x.clone()], &|tape, ids| tape.sum(ids[0]).unwrap());
        fd_gradcheck("mean", &[x.clone()], &|tape, ids| tape.mean(ids[0]).unwrap());
        fd_gradcheck("norm", &[pos], &|tape, ids| tape.norm(ids[0]).unwrap());
        fd_gradcheck("reshape", &[x], &|tape, ids| {
            let y = tape.reshape(ids[0], vec![2, 3]).unwrap();
            scalarize(tape, y, &probe)
        });
    }
}

#[test]
fn fd_max_over_axis_and_dot() {
    let mut r = rng::stream(17, &[1]);
    for _ in 0..POINTS {
        let x = rand_tensor_separated(&mut r, &[3, 4], 1e-3);
        let a = rand_tensor(&mut r, &[5], -2.0, 2.0);
        let b = rand_tensor(&mut r, &[5], -2.0, 2.0);
        let probe3 = rand_probe(&mut r, 3);
        let probe4 = rand_probe(&mut r, 4);
        fd_gradcheck("max_over_axis-1", &[x.clone()], &|tape, ids| {
            let y = tape.max_over_axis(ids[0], 1).unwrap();
            scalarize(tape, y, &probe3)
        });
        fd_gradcheck("max_over_axis-0", &[x], &|tape, ids| {
            let y = tape.max_over_axis(ids[0], 0).unwrap();
            scalarize(tape, y, &probe4)
        });
        fd_gradcheck("dot", &[a, b], &|tape, ids| tape.dot(ids[0], ids[1]).unwrap());
    }
}

/// Two-layer MLP: full-coordinate finite-difference check of input and all
/// parameters at several random points.
#[test]
fn fd_mlp_full() {
    let mut r = rng::stream(18, &[1]);
    for _ in 0..4 {
        let x = rand_tensor(&mut r, &[12], -1.0, 1.0);
        let w1 = rand_tensor(&mut r, &[16, 12], -0.5, 0.5);
        let b1 = rand_tensor(&mut r, &[16], -0.3, 0.3);
        let w2 = rand_tensor(&mut r, &[8, 16], -0.5, 0.5);
        let b2 = rand_tensor(&mut r, &[8], -0.3, 0.3);
        let probe = rand_probe(&mut r, 8);
        fd_gradcheck("mlp", &[x, w1, b1, w2, b2], &|tape, ids| {
            let h = tape.matmul(ids[1], ids[0]).unwrap();
            let h = tape.add(h, ids[2]).unwrap();
            let h = tape.relu(h).unwrap();
            let o = tape.matmul(ids[3], h).unwrap();
            let o = tape.add(o, ids[4]).unwrap();
            scalarize(tape, o, &probe)
        });
    }
}

/// Conv→pool→conv→pool→dense→dense graph on a 28×28 input: sampled random
/// coordinates of the input and every parameter tensor against central FD.
#[test]
fn fd_lenet_like_sampled() {
    let mut r = rng::stream(19, &[1]);
    let inputs = vec![
        rand_tensor(&mut r, &[1, 28, 28], 0.05, 1.0),
        rand_tensor(&mut r, &[8, 1, 5, 5], -0.3, 0.3),
        rand_tensor(&mut r, &[8], -0.1, 0.1),
        rand_tensor(&mut r, &[16, 8, 5, 5], -0.2, 0.2),
        rand_tensor(&mut r, &[16], -0.1, 0.1),
        rand_tensor(&mut r, &[64, 256], -0.2, 0.2),
        rand_tensor(&mut r, &[64], -0.1, 0.1),
        rand_tensor(&mut r, &[15, 64], -0.3, 0.3),
        rand_tensor(&mut r, &[15], -0.1, 0.1),
    ];
    let probe = rand_probe(&mut r, 15);
    let build = move |tape: &mut Tape, ids: &[NodeId]| -> NodeId {
        let c1 = tape.conv2d(ids[0], ids[1], 1).unwrap();
        let c1 = tape.add(c1, ids[2]).unwrap();
        let c1 = tape.relu(c1).unwrap();
        let p1 = tape.maxpool2d(c1, 2).unwrap();
        let c2 = tape.conv2d(p1, ids[3], 1).unwrap();
        let c2 = tape.add(c2, ids[4]).unwrap();
        let c2 = tape.relu(c2).unwrap();
        let p2 = tape.maxpool2d(c2, 2).unwrap();
        let flat = tape.reshape(p2, vec![256]).unwrap();
        let d1 = tape.matmul(ids[5], flat).unwrap();
        let d1 = tape.add(d1, ids[6]).unwrap();
        let d1 = tape.relu(d1).unwrap();
        let d2 = tape.matmul(ids[7], d1).unwrap();
        let d2 = tape.add(d2, ids[8]).unwrap();
        scalarize(tape, d2, &probe)
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids);
    let grads = tape.gradient(out, &ids).unwrap();

    let mut checked = 0;
    while checked < 120 {
        let ti = r.gen_range(0..inputs.len());
        let coord = r.gen_range(0..inputs[ti].len());
        let analytic = grads.or_zeros(&tape, ids[ti]).data()[coord];
        let numeric = fd_coord(&inputs, &build, ti, coord);
        assert!(
            fd_close(analytic, numeric),
            "lenet: tensor {ti} coord {coord}: analytic {analytic} vs fd {numeric}"
        );
        checked += 1;
    }
}

/// Jacobian of a small CNN embedding against per-column finite differences.
#[test]
fn jacobian_matches_finite_differences() {
    let mut r = rng::stream(20, &[1]);
    let x = rand_tensor(&mut r, &[1, 8, 8], 0.1, 1.0);
    let k = rand_tensor(&mut r, &[2, 1, 3, 3], -0.5, 0.5);
    let w = rand_tensor(&mut r, &[4, 2 * 3 * 3], -0.5, 0.5);

    let build_embed = |tape: &mut Tape, xs: &[Tensor]| -> (Vec<NodeId>, NodeId) {
        let ids: Vec<NodeId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let c = tape.conv2d(ids[0], ids[1], 1).unwrap();
        let c = tape.relu(c).unwrap();
        let p = tape.maxpool2d(c, 2).unwrap();
        let flat = tape.reshape(p, vec![2 * 3 * 3]).unwrap();
        let z = tape.matmul(ids[2], flat).unwrap();
        (ids, z)
    };

    let inputs = vec![x.clone(), k.clone(), w.clone()];
    let mut tape = Tape::new();
    let (ids, z) = build_embed(&mut tape, &inputs);
    let jac = tape.jacobian(z, ids[0]).unwrap();
    let (e_dim, d_dim) = (jac.dims()[0], jac.dims()[1]);
    assert_eq!((e_dim, d_dim), (4, 64));

    for col in 0..d_dim {
        let mut plus = inputs.clone();
        plus[0].data_mut()[col] += FD_STEP;
        let mut minus = inputs.clone();
        minus[0].data_mut()[col] -= FD_STEP;
        let eval = |xs: &[Tensor]| -> Vec<f64> {
            let mut tape = Tape::new();
            let (_, z) = build_embed(&mut tape, xs);
            tape.value(z).data().to_vec()
        };
        let (zp, zm) = (eval(&plus), eval(&minus));
        for e in 0..e_dim {
            let numeric = (zp[e] - zm[e]) / (2.0 * FD_STEP);
            let analytic = jac.data()[e * d_dim + col];
            assert!(
                fd_close(analytic, numeric),
                "jacobian[{e},{col}]: {analytic} vs fd {numeric}"
            );
        }
    }
}

/// Jacobian row e must equal the gradient of the e-th output coordinate.
#[test]
fn jacobian_rows_equal_coordinate_gradients() {
    let mut r = rng::stream(21, &[1]);
    let x = rand_tensor(&mut r, &[6], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[3, 6], -1.0, 1.0);

    let mut tape = Tape::new();
    let xid = tape.leaf(x);
    let wid = tape.leaf(w);
    let h = tape.matmul(wid, xid).unwrap();
    let z = tape.relu(h).unwrap();
    let jac = tape.jacobian(z, xid).unwrap();

    for e in 0..3 {
        let pick = tape.leaf(Tensor::one_hot(3, e));
        let coord = tape.dot(z, pick).unwrap();
        let grads = tape.gradient(coord, &[xid]).unwrap();
        let row = &jac.data()[e * 6..(e + 1) * 6];
        for (a, b) in row.iter().zip(grads.get(xid).unwrap().data()) {
            assert!((a - b).abs() <= 1e-12, "row {e}: {a} vs {b}");
        }
    }
}

/// grad(a·f + b·g) = a·grad(f) + b·grad(g), elementwise to 1e-10 relative.
#[test]
fn gradient_is_linear() {
    let mut r = rng::stream(22, &[1]);
    for _ in 0..20 {
        let x = rand_tensor(&mut r, &[10], -1.0, 1.0);
        let wf = rand_tensor(&mut r, &[10], -1.0, 1.0);
        let wg = rand_tensor(&mut r, &[10], -1.0, 1.0);
        let (a, b): (f64, f64) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));

        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let wfid = tape.leaf(wf);
        let wgid = tape.leaf(wg);
        // f = dot(x, wf)², g = exp(dot(x, wg))
        let df = tape.dot(xid, wfid).unwrap();
        let f = tape.mul(df, df).unwrap();
        let dg = tape.dot(xid, wgid).unwrap();
        let g = tape.exp(dg).unwrap();
        let af = tape.scale(f, a).unwrap();
        let bg = tape.scale(g, b).unwrap();
        let combined = tape.add(af, bg).unwrap();

        let grad_combined = tape.gradient(combined, &[xid]).unwrap();
        let grad_f = tape.gradient(f, &[xid]).unwrap();
        let grad_g = tape.gradient(g, &[xid]).unwrap();

        for i in 0..10 {
            let lhs = grad_combined.get(xid).unwrap().data()[i];
            let rhs = a * grad_f.get(xid).unwrap().data()[i] + b * grad_g.get(xid).unwrap().data()[i];
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            assert!((lhs - rhs).abs() / scale < 1e-10, "coord {i}: {lhs} vs {rhs}");
        }
    }
}
