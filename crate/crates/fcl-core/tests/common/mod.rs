//! Shared helpers for gradient-oracle integration tests.
// Each integration-test target compiles this module independently and uses
// a different subset of the helpers.
#![allow(dead_code)]

use fcl_core::{NodeId, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL: f64 = 1e-4;
pub const FD_ABS: f64 = 1e-7;

/// Central-difference agreement rule: absolute slack near zero, relative
/// tolerance elsewhere.
pub fn fd_close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= FD_ABS || diff / analytic.abs().max(numeric.abs()) < FD_REL
}

/// Checks every coordinate of every input of a scalar-valued graph against
/// central finite differences. `build` must construct the same graph for any
/// leaf values.
pub fn fd_gradcheck(name: &str, inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId) {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids);
    let grads = tape.gradient(out, &ids).expect("analytic gradient");

    for (ti, tensor) in inputs.iter().enumerate() {
        let g = grads.or_zeros(&tape, ids[ti]);
        for c in 0..tensor.len() {
            let numeric = fd_coord(inputs, build, ti, c);
            let analytic = g.data()[c];
            assert!(
                fd_close(analytic, numeric),
                "{name}: input {ti} coord {c}: analytic {analytic} vs finite difference {numeric}"
            );
        }
    }
}

/// Central finite difference of the scalar graph along one input coordinate.
pub fn fd_coord(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
    input_index: usize,
    coord: usize,
) -> f64 {
    fd_coord_step(inputs, build, input_index, coord, FD_STEP)
}

/// [`fd_coord`] with an explicit step, for checks that compare estimates
/// across step sizes.
pub fn fd_coord_step(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
    input_index: usize,
    coord: usize,
    step: f64,
) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids);
        tape.value(out).item()
    };
    let mut plus = inputs.to_vec();
    plus[input_index].data_mut()[coord] += step;
    let mut minus = inputs.to_vec();
    minus[input_index].data_mut()[coord] -= step;
    (eval(&plus) - eval(&minus)) / (2.0 * step)
}

/// Uniform draw over [lo, hi) per element.
pub fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let volume: usize = dims.iter().product();
    let data = (0..volume).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

/// Draw with magnitude in [margin, hi) and random sign, keeping every value
/// a safe distance from the relu/max kinks so finite differences stay valid.
pub fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, dims: &[usize], margin: f64, hi: f64) -> Tensor {
    let volume: usize = dims.iter().product();
    let data = (0..volume)
        .map(|_| {
            let magnitude = rng.gen_range(margin..hi);
            if rng.gen_bool(0.5) {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

/// Draw where all pairwise gaps within each `window`-sized group exceed
/// `gap`, so pooling/max argmax choices are stable under the FD step.
pub fn rand_tensor_separated(rng: &mut ChaCha8Rng, dims: &[usize], gap: f64) -> Tensor {
    let volume: usize = dims.iter().product();
    loop {
        let data: Vec<f64> = (0..volume).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut sorted = data.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.windows(2).all(|w| w[1] - w[0] > gap) {
            return Tensor::new(dims.to_vec(), data).unwrap();
        }
    }
}

/// Projects any tensor node to a scalar by flattening and dotting with a
/// fixed probe, so per-coordinate backward paths are exercised with distinct
/// weights.
pub fn scalarize(tape: &mut Tape, id: NodeId, probe: &[f64]) -> NodeId {
    let len = tape.value(id).len();
    assert_eq!(len, probe.len(), "probe length mismatch");
    let flat = tape.reshape(id, vec![len]).unwrap();
    let p = tape.leaf(Tensor::vector(probe.to_vec()));
    tape.dot(flat, p).unwrap()
}

pub fn rand_probe(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
