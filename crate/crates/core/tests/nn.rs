mod common;

use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tripose::embedding::Modality;
use tripose::gradgate::{run_component, Component};
use tripose::nn::{
    decode, decode_backward, encode, encode_backward, predict_pose, AdamConfig, AdamState, DenseMlp, PoseKind,
    RepresentationToken,
};

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn reshape(p: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), p.to_vec()).unwrap()
}

/// Random linear functional of the output, so every output coordinate
/// contributes to the checked gradient.
fn probe(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    gaussian(rng, rows, cols)
}

#[test]
fn forward_matches_reference_seed_21() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let widths = [7, 11, 9, 5];
    let net = DenseMlp::new(&widths, &mut rng).unwrap();
    let x = gaussian(&mut rng, 13, 7);
    let (y, _) = net.forward(x.view()).unwrap();
    for (row, out) in x.rows().into_iter().zip(y.rows()) {
        let want = mlp_reference(&widths, net.params(), &row.to_vec());
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(net.predict(x.view()).unwrap(), y);
}

#[test]
fn backward_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let widths = [4, 6, 3];
    let net = DenseMlp::new(&widths, &mut rng).unwrap();
    let x = gaussian(&mut rng, 5, 4);
    let w = probe(&mut rng, 5, 3);
    let (_, cache) = net.forward(x.view()).unwrap();
    let g = net.backward(&cache, w.view()).unwrap();

    let out_of = |params: &[f64], input: &Array2<f64>| -> f64 {
        input
            .rows()
            .into_iter()
            .zip(w.rows())
            .map(|(r, wr)| {
                mlp_reference(&widths, params, &r.to_vec())
                    .iter()
                    .zip(wr)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum()
    };
    let np = numeric_gradient(|p| out_of(p, &x), net.params(), 1e-6);
    assert!(max_rel_err(&g.params, &np) < 1e-5);
    let nx = numeric_gradient(|p| out_of(net.params(), &reshape(p, 5, 4)), &flat(&x), 1e-6);
    assert!(max_rel_err(&flat(&g.input), &nx) < 1e-5);
}

#[test]
fn encoder_gradient_through_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let widths = [5, 8, 4];
    let net = DenseMlp::new(&widths, &mut rng).unwrap();
    let x = gaussian(&mut rng, 3, 5);
    let w = probe(&mut rng, 3, 4);
    let (emb, cache) = encode(&net, x.view()).unwrap();
    for r in emb.rows() {
        assert!((r.dot(&r) - 1.0).abs() < 1e-12);
    }
    let g = encode_backward(&net, &cache, w.view()).unwrap();
    let f = |p: &[f64]| -> f64 {
        x.rows()
            .into_iter()
            .zip(w.rows())
            .map(|(r, wr)| {
                let v = mlp_reference(&widths, p, &r.to_vec());
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.iter().zip(wr).map(|(a, b)| a / n * b).sum::<f64>()
            })
            .sum()
    };
    let np = numeric_gradient(f, net.params(), 1e-6);
    assert!(max_rel_err(&g.params, &np) < 1e-5);
}

#[test]
fn decoder_sees_embedding_plus_source_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let d = 4;
    let net = DenseMlp::new(&[d, 6, 3 * 5], &mut rng).unwrap();
    let tok = RepresentationToken::random(d, 0.3, &mut rng);
    let emb = unit_rows(&mut rng, 2, d);
    for src in Modality::ALL {
        let (out, _) = decode(&net, emb.view(), Some(&tok), src, PoseKind::ThreeD).unwrap();
        let shifted = &emb + &tok.values().row(src.index());
        assert_eq!(out, net.predict(shifted.view()).unwrap());
        assert_eq!(out, predict_pose(&net, emb.view(), Some(&tok), src, PoseKind::ThreeD).unwrap());
    }
    let a = predict_pose(&net, emb.view(), None, Modality::Image, PoseKind::ThreeD).unwrap();
    let b = predict_pose(&net, emb.view(), None, Modality::Pose2D, PoseKind::ThreeD).unwrap();
    assert_eq!(a, b);
    assert!(predict_pose(&net, emb.view(), None, Modality::Image, PoseKind::TwoD).is_err());
}

#[test]
fn decoder_token_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let d = 3;
    let net = DenseMlp::new(&[d, 5, 4], &mut rng).unwrap();
    let tok = RepresentationToken::random(d, 0.2, &mut rng);
    let emb = unit_rows(&mut rng, 4, d);
    let w = probe(&mut rng, 4, 4);
    let (_, cache) = decode(&net, emb.view(), Some(&tok), Modality::Pose2D, PoseKind::TwoD).unwrap();
    let g = decode_backward(&net, &cache, w.view()).unwrap();
    let f = |t: &[f64]| -> f64 {
        let tk = RepresentationToken::from_values(reshape(t, 3, d)).unwrap();
        let out = predict_pose(&net, emb.view(), Some(&tk), Modality::Pose2D, PoseKind::TwoD).unwrap();
        (&out * &w).sum()
    };
    let nt = numeric_gradient(f, tok.as_slice(), 1e-6);
    let gt = g.token.unwrap();
    assert!(max_rel_err(&flat(&gt), &nt) < 1e-5);
    assert!(gt.row(0).iter().chain(gt.row(2).iter()).all(|v| *v == 0.0));
}

#[test]
fn adam_first_step_and_quadratic_descent() {
    let cfg = AdamConfig::with_lr(0.01);
    let mut st = AdamState::new(3, cfg);
    let mut p = vec![1.0, -2.0, 0.5];
    let g = [0.3, -4.0, 1e-3];
    st.step(&mut p, &g).unwrap();
    // Bias-corrected moments are g and g², so the update is lr·g/(|g|+ε).
    for (i, (x, x0)) in p.iter().zip([1.0, -2.0, 0.5]).enumerate() {
        let want = x0 - 0.01 * g[i] / (g[i].abs() + 1e-8);
        assert!((x - want).abs() < 1e-15);
    }

    let diag = [1.0, 3.0, 0.2, 5.0];
    let loss = |x: &[f64]| x.iter().zip(diag).map(|(v, d)| d * v * v).sum::<f64>();
    let mut x = vec![1.0, -1.0, 2.0, 0.5];
    let mut st = AdamState::new(4, AdamConfig::with_lr(0.05));
    let mut hist = vec![loss(&x)];
    for _ in 0..100 {
        let g: Vec<f64> = x.iter().zip(diag).map(|(v, d)| 2.0 * d * v).collect();
        st.step(&mut x, &g).unwrap();
        hist.push(loss(&x));
    }
    assert!(hist[100] < 0.05 * hist[0]);
    assert!(hist[..20].windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn full_contrastive_closure_passes_the_gate() {
    for c in Component::ALL {
        let r = run_component(c, 10, false).unwrap();
        assert!(r.passed(), "{c}: {:?}", r.checks);
        assert!(r.max_rel_err() < 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn from_params_round_trips(seed in any::<u64>(), a in 1usize..6, b in 1usize..6, c in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DenseMlp::new(&[a, b, c], &mut rng).unwrap();
        let back = DenseMlp::from_params(&[a, b, c], net.params().to_vec()).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert!(DenseMlp::from_params(&[a, b, c], vec![0.0; net.param_count() + 1]).is_err());
    }
}
