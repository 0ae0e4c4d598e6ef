//! Attribution values checked against independent oracles: central finite
//! differences of the loss and embedding, closed-form column norms for
//! linear embeddings, and the inverse-probability product identity.

use fcl_core::attribution::{
    sensitivity_continuous, utility_continuous, utility_decomposition,
};
use fcl_core::losses::cross_entropy;
use fcl_core::model::{bind_params, forward_embed, forward_logits, LayerSpec, ModelSpec, Parameters};
use fcl_core::rng;
use fcl_core::{Tape, Tensor};
use rand::Rng;

const FD_STEP: f64 = 1e-5;

fn loss_at(spec: &ModelSpec, params: &Parameters, x: &Tensor, label: usize) -> f64 {
    let mut tape = Tape::new();
    let pn = bind_params(&mut tape, params);
    let xid = tape.leaf(x.clone());
    let logits = forward_logits(&mut tape, spec, &pn, xid).unwrap();
    let loss = cross_entropy(&mut tape, logits, label).unwrap();
    tape.value(loss).item()
}

fn embed_at(spec: &ModelSpec, params: &Parameters, x: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let pn = bind_params(&mut tape, params);
    let xid = tape.leaf(x.clone());
    let z = forward_embed(&mut tape, spec, &pn, xid).unwrap();
    tape.value(z).data().to_vec()
}

/// rel 1e-4 with an absolute floor at the finite-difference noise level.
fn fd_agree(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-7 || diff / numeric.abs().max(1e-12) < 1e-4
}

fn mlp_spec(d: usize, hidden: usize, classes: usize) -> ModelSpec {
    ModelSpec {
        input: vec![d],
        embedding: vec![
            LayerSpec::Dense { out_features: hidden },
            LayerSpec::Relu,
            LayerSpec::Dense { out_features: hidden },
            LayerSpec::Relu,
        ],
        classes,
    }
}

#[test]
fn utility_matches_absolute_loss_finite_differences() {
    let mut r = rng::stream(77, &[1]);
    for round in 0..10 {
        let d = 6;
        let spec = mlp_spec(d, 8, 3);
        let params = Parameters::init(&spec, 100 + round).unwrap();
        // keep coordinates away from relu kinks reached by h = W x
        let x = Tensor::vector((0..d).map(|_| r.gen_range(0.2..1.0) * sign(&mut r)).collect());
        let label = r.gen_range(0..3);

        let u = utility_continuous(&spec, &params, &x, label).unwrap();
        for j in 0..d {
            let mut hi = x.clone();
            hi.data_mut()[j] += FD_STEP;
            let mut lo = x.clone();
            lo.data_mut()[j] -= FD_STEP;
            let fd =
                ((loss_at(&spec, &params, &hi, label) - loss_at(&spec, &params, &lo, label))
                    / (2.0 * FD_STEP))
                    .abs();
            assert!(
                fd_agree(u.values.data()[j], fd),
                "round {round} feature {j}: utility {} vs fd {fd}",
                u.values.data()[j]
            );
        }
    }
}

#[test]
fn sensitivity_matches_closed_form_column_norms_on_linear_embeddings() {
    let mut r = rng::stream(77, &[2]);
    for _ in 0..20 {
        let (d, e) = (r.gen_range(2..6), r.gen_range(2..6));
        let spec = ModelSpec {
            input: vec![d],
            embedding: vec![LayerSpec::Dense { out_features: e }],
            classes: 2,
        };
        let mut params = Parameters::init(&spec, 7).unwrap();
        let w: Vec<f64> = (0..e * d).map(|_| r.gen_range(-2.0..2.0)).collect();
        *params.get_mut("phi.0.weight").unwrap() = Tensor::new(vec![e, d], w.clone()).unwrap();

        let x = Tensor::vector((0..d).map(|_| r.gen_range(-1.0..1.0)).collect());
        let s = sensitivity_continuous(&spec, &params, &x).unwrap();
        for j in 0..d {
            let col_norm: f64 = (0..e).map(|row| w[row * d + j].powi(2)).sum::<f64>().sqrt();
            assert!(
                (s.values.data()[j] - col_norm).abs() < 1e-10,
                "feature {j}: {} vs {col_norm}",
                s.values.data()[j]
            );
        }
    }
}

#[test]
fn sensitivity_matches_embedding_finite_differences_on_a_cnn() {
    let spec = ModelSpec {
        input: vec![1, 8, 8],
        embedding: vec![
            LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 5 },
        ],
        classes: 3,
    };
    let params = Parameters::init(&spec, 55).unwrap();
    let mut r = rng::stream(77, &[3]);
    let d = 64;
    let x = Tensor::vector((0..d).map(|_| r.gen_range(0.1..0.9)).collect());

    let s = sensitivity_continuous(&spec, &params, &x).unwrap();
    for j in 0..d {
        let mut hi = x.clone();
        hi.data_mut()[j] += FD_STEP;
        let mut lo = x.clone();
        lo.data_mut()[j] -= FD_STEP;
        let zh = embed_at(&spec, &params, &hi);
        let zl = embed_at(&spec, &params, &lo);
        let fd_norm: f64 = zh
            .iter()
            .zip(&zl)
            .map(|(a, b)| ((a - b) / (2.0 * FD_STEP)).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(
            fd_agree(s.values.data()[j], fd_norm),
            "pixel {j}: sensitivity {} vs fd {fd_norm}",
            s.values.data()[j]
        );
    }
}

#[test]
fn decomposition_product_reconstructs_utility_on_100_random_triples() {
    let mut r = rng::stream(77, &[4]);
    for round in 0..100 {
        let d = r.gen_range(3..7);
        let classes = r.gen_range(2..5);
        let spec = mlp_spec(d, r.gen_range(4..9), classes);
        let params = Parameters::init(&spec, 1000 + round).unwrap();
        let x = Tensor::vector((0..d).map(|_| r.gen_range(-1.5..1.5)).collect());
        let label = r.gen_range(0..classes);

        let u = utility_continuous(&spec, &params, &x, label).unwrap();
        let (inv_p, grad) = utility_decomposition(&spec, &params, &x, label).unwrap();
        for j in 0..d {
            let reconstructed = inv_p * grad.data()[j];
            let want = u.values.data()[j];
            let diff = (reconstructed - want).abs();
            assert!(
                diff <= 1e-6 * want.abs().max(1e-9),
                "round {round} feature {j}: {reconstructed} vs {want}"
            );
        }
    }
}

#[test]
fn scaling_the_loss_scales_utility_linearly() {
    // utility of c·ℓ must be exactly c times the utility of ℓ
    let spec = mlp_spec(5, 6, 3);
    let params = Parameters::init(&spec, 9).unwrap();
    let x = Tensor::vector(vec![0.4, -0.9, 0.3, 1.2, -0.2]);
    let label = 1;
    let c = 3.75;

    let grad_of_scaled = |factor: f64| -> Vec<f64> {
        let mut tape = Tape::new();
        let pn = bind_params(&mut tape, &params);
        let xid = tape.leaf(x.clone());
        let logits = forward_logits(&mut tape, &spec, &pn, xid).unwrap();
        let loss = cross_entropy(&mut tape, logits, label).unwrap();
        let scaled = tape.scale(loss, factor).unwrap();
        let grads = tape.gradient(scaled, &[xid]).unwrap();
        grads.get(xid).unwrap().data().iter().map(|v| v.abs()).collect()
    };

    let base = grad_of_scaled(1.0);
    let scaled = grad_of_scaled(c);
    let direct = utility_continuous(&spec, &params, &x, label).unwrap();
    for j in 0..5 {
        assert_eq!(base[j], direct.values.data()[j]);
        assert!((scaled[j] - c * base[j]).abs() <= 1e-12 * scaled[j].abs());
    }
}

fn sign(r: &mut rand_chacha::ChaCha8Rng) -> f64 {
    if r.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}
