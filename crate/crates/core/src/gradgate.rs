//! Seeded finite-difference suites for every hand-written gradient.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::linalg3::{top_eigenvalue, top_eigenvalue_grad, Sym3, TopEigen, TopEigenGrad};
use crate::losses::{
    contrastive_loss, info_nce_pair, info_nce_triplet, l2_pose_loss, LossTerms,
    NegativeTripletSet, Temperature, TemperatureConfig,
};
use crate::nn::{
    decode, decode_backward, encode, encode_backward, gradient_check, DenseMlp, GradCheckOptions,
    GradCheckReport, PoseKind, RepresentationToken,
};

/// Instances whose candidate triples have a smaller eigen-gap are redrawn.
pub const MIN_GATE_GAP: f64 = 1e-4;
const BATCH: usize = 3;
const DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Losses,
    Nn,
}

impl Component {
    pub const ALL: [Component; 2] = [Component::Losses, Component::Nn];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Losses => "losses",
            Component::Nn => "nn",
        })
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Component> {
        match s {
            "losses" => Ok(Component::Losses),
            "nn" => Ok(Component::Nn),
            other => Err(Error::invalid(format!("unknown component `{other}` (losses, nn)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: Component,
    pub seeds: u64,
    /// Per-check reports merged over seeds.
    pub checks: BTreeMap<String, GradCheckReport>,
}

impl ComponentReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.values().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.values().all(GradCheckReport::passed)
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn unit_rows<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    let mut m = gauss(rng, shape);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn slice_to(m: &[f64], shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_vec(shape, m.to_vec()).expect("shape")
}

fn flat(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

/// Runs one finite-difference comparison. With `fault`, the analytic gradient
/// is scaled by 1.001, which the gate must flag.
fn check(
    out: &mut BTreeMap<String, GradCheckReport>,
    name: &str,
    f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    mut analytic: Vec<f64>,
    seed: u64,
    fault: bool,
) {
    if fault {
        for g in &mut analytic {
            *g *= 1.001;
        }
    }
    let opts = GradCheckOptions {
        seed,
        ..Default::default()
    };
    let r = gradient_check(f, params, &analytic, opts);
    out.entry(name.to_string())
        .and_modify(|acc| *acc = acc.merge(&r))
        .or_insert(r);
}

fn min_candidate_gap(x: [&Array2<f64>; 3], neg: &NegativeTripletSet) -> Result<f64> {
    let mut gap = f64::INFINITY;
    for a in 0..BATCH {
        for [i, j, k] in std::iter::once([a; 3]).chain(neg.anchor(a).iter().copied()) {
            let (r1, r2, r3) = (x[0].row(i), x[1].row(j), x[2].row(k));
            let g = Sym3::new(r1.dot(&r1), r1.dot(&r2), r1.dot(&r3), r2.dot(&r2), r2.dot(&r3), r3.dot(&r3));
            gap = gap.min(TopEigen::of_gram(&g)?.gap);
        }
    }
    Ok(gap)
}

/// Tri-modal tiny batch and negatives with every candidate gap above
/// [`MIN_GATE_GAP`].
fn triplet_instance(seed: u64) -> Result<([Array2<f64>; 3], NegativeTripletSet)> {
    for attempt in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let x = [
            unit_rows(&mut rng, (BATCH, DIM)),
            unit_rows(&mut rng, (BATCH, DIM)),
            unit_rows(&mut rng, (BATCH, DIM)),
        ];
        let neg = NegativeTripletSet::sample(BATCH, seed.wrapping_add(attempt << 32))?;
        if min_candidate_gap([&x[0], &x[1], &x[2]], &neg)? > MIN_GATE_GAP {
            return Ok((x, neg));
        }
    }
    Err(Error::Degenerate("no well-separated triplet instance found".into()))
}

fn loss_checks(seed: u64, fault: bool, out: &mut BTreeMap<String, GradCheckReport>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = (BATCH, DIM);
    let n = BATCH * DIM;
    let tau = rng.random_range(0.1..1.0);

    // Pair InfoNCE in both arguments and τ.
    let (s, t) = (unit_rows(&mut rng, shape), unit_rows(&mut rng, shape));
    let p = info_nce_pair(s.view(), t.view(), tau)?;
    let params = concat(&[&flat(&s), &flat(&t), &[tau]]);
    let analytic = concat(&[&flat(&p.grad_source), &flat(&p.grad_target), &[p.grad_tau]]);
    check(
        out,
        "pair",
        |x| {
            info_nce_pair(slice_to(&x[..n], shape).view(), slice_to(&x[n..2 * n], shape).view(), x[2 * n])
                .map_or(f64::NAN, |l| l.loss)
        },
        &params,
        analytic,
        seed,
        fault,
    );

    // Top eigenvalue of M Mᵀ.
    let m = loop {
        let m = gauss(&mut rng, (3, DIM));
        if let TopEigenGrad::Regular { .. } = top_eigenvalue_grad(m.view())? {
            let g = Sym3::gram(m.view())?;
            if TopEigen::of_gram(&g)?.gap > MIN_GATE_GAP {
                break m;
            }
        }
    };
    if let TopEigenGrad::Regular { grad, .. } = top_eigenvalue_grad(m.view())? {
        check(
            out,
            "lambda1",
            |x| top_eigenvalue(slice_to(x, (3, DIM)).view()).unwrap_or(f64::NAN),
            &flat(&m),
            flat(&grad),
            seed,
            fault,
        );
    }

    // Triplet InfoNCE in all three batches and τ.
    let (x, neg) = triplet_instance(seed)?;
    let tl = info_nce_triplet(x[0].view(), x[1].view(), x[2].view(), tau, &neg)?;
    let params = concat(&[&flat(&x[0]), &flat(&x[1]), &flat(&x[2]), &[tau]]);
    let analytic = concat(&[&flat(&tl.grads[0]), &flat(&tl.grads[1]), &flat(&tl.grads[2]), &[tl.grad_tau]]);
    let trip = |x: &[f64], tau: f64| {
        info_nce_triplet(
            slice_to(&x[..n], shape).view(),
            slice_to(&x[n..2 * n], shape).view(),
            slice_to(&x[2 * n..3 * n], shape).view(),
            tau,
            &neg,
        )
        .map_or(f64::NAN, |l| l.loss)
    };
    check(out, "triplet", |p| trip(p, p[3 * n]), &params, analytic, seed, fault);

    // Full contrastive objective, with both temperatures learned in log space.
    let alpha = rng.random_range(0.1..2.0);
    let terms = LossTerms {
        pair_2d_3d: true,
        pair_image_2d: true,
        pair_image_3d: true,
        triplet: true,
    };
    let tcfg = TemperatureConfig::new(tau, 1e-3, 1e3);
    let tp = Temperature::new(tcfg)?;
    let tt = Temperature::new(TemperatureConfig::new(tau * 1.3, 1e-3, 1e3))?;
    let cl = contrastive_loss(
        [Some(x[0].view()), Some(x[1].view()), Some(x[2].view())],
        tp.value(),
        tt.value(),
        alpha,
        terms,
        Some(&neg),
    )?;
    let grads: Vec<Vec<f64>> = cl.grads.iter().map(|g| flat(g.as_ref().unwrap())).collect();
    let params = concat(&[&flat(&x[0]), &flat(&x[1]), &flat(&x[2]), &[tp.log_value(), tt.log_value()]]);
    let analytic = concat(&[
        &grads[0],
        &grads[1],
        &grads[2],
        &[tp.log_grad(cl.grad_tau_pair), tt.log_grad(cl.grad_tau_triplet)],
    ]);
    check(
        out,
        "contrastive",
        |p| {
            let v = |k: usize| slice_to(&p[k * n..(k + 1) * n], shape);
            let (a, b, c) = (v(0), v(1), v(2));
            contrastive_loss(
                [Some(a.view()), Some(b.view()), Some(c.view())],
                p[3 * n].exp(),
                p[3 * n + 1].exp(),
                alpha,
                terms,
                Some(&neg),
            )
            .map_or(f64::NAN, |l| l.total)
        },
        &params,
        analytic,
        seed,
        fault,
    );

    // Pose regression loss.
    let (pred, target) = (gauss(&mut rng, (2, 6)), gauss(&mut rng, (2, 6)));
    let l = l2_pose_loss(pred.view(), target.view())?;
    check(
        out,
        "l2_pose",
        |p| l2_pose_loss(slice_to(p, (2, 6)).view(), target.view()).map_or(f64::NAN, |l| l.loss),
        &flat(&pred),
        flat(&l.grad),
        seed,
        fault,
    );
    Ok(())
}

fn weighted_sum(y: ArrayView2<'_, f64>, w: &Array2<f64>) -> f64 {
    (&y * w).sum()
}

fn nn_checks(seed: u64, fault: bool, out: &mut BTreeMap<String, GradCheckReport>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let widths = [5, 7, 6, 4];

    // Plain MLP, parameters and input.
    let net = DenseMlp::new(&widths, &mut rng)?;
    let x = gauss(&mut rng, (3, widths[0]));
    let w = gauss(&mut rng, (3, widths[3]));
    let (_, cache) = net.forward(x.view())?;
    let g = net.backward(&cache, w.view())?;
    check(
        out,
        "mlp_params",
        |p| {
            DenseMlp::from_params(&widths, p.to_vec())
                .and_then(|m| m.predict(x.view()))
                .map_or(f64::NAN, |y| weighted_sum(y.view(), &w))
        },
        net.params(),
        g.params.clone(),
        seed,
        fault,
    );
    check(
        out,
        "mlp_input",
        |p| net.predict(slice_to(p, x.dim()).view()).map_or(f64::NAN, |y| weighted_sum(y.view(), &w)),
        &flat(&x),
        flat(&g.input),
        seed,
        fault,
    );

    // Encoder: network followed by row normalization.
    let (_, cache) = encode(&net, x.view())?;
    let g = encode_backward(&net, &cache, w.view())?;
    check(
        out,
        "encoder",
        |p| {
            DenseMlp::from_params(&widths, p.to_vec())
                .and_then(|m| encode(&m, x.view()))
                .map_or(f64::NAN, |(y, _)| weighted_sum(y.view(), &w))
        },
        net.params(),
        g.params,
        seed,
        fault,
    );

    // Decoder with a representation token: parameters, embeddings, token.
    let d = 4;
    let dwidths = [d, 8, 6];
    let dec = DenseMlp::new(&dwidths, &mut rng)?;
    let tok = RepresentationToken::random(d, 0.5, &mut rng);
    let emb = unit_rows(&mut rng, (3, d));
    let w = gauss(&mut rng, (3, 6));
    let src = Modality::ALL[(seed % 3) as usize];
    let (_, cache) = decode(&dec, emb.view(), Some(&tok), src, PoseKind::ThreeD)?;
    let g = decode_backward(&dec, &cache, w.view())?;
    let out_of = |m: &DenseMlp, e: &Array2<f64>, t: &RepresentationToken| {
        decode(m, e.view(), Some(t), src, PoseKind::ThreeD).map_or(f64::NAN, |(y, _)| weighted_sum(y.view(), &w))
    };
    check(
        out,
        "decoder_params",
        |p| DenseMlp::from_params(&dwidths, p.to_vec()).map_or(f64::NAN, |m| out_of(&m, &emb, &tok)),
        dec.params(),
        g.params.clone(),
        seed,
        fault,
    );
    check(
        out,
        "decoder_embeddings",
        |p| out_of(&dec, &slice_to(p, emb.dim()), &tok),
        &flat(&emb),
        flat(&g.embeddings),
        seed,
        fault,
    );
    let tg = g.token.expect("token was used");
    check(
        out,
        "decoder_token",
        |p| {
            RepresentationToken::from_values(slice_to(p, (3, d)))
                .map_or(f64::NAN, |t| out_of(&dec, &emb, &t))
        },
        tok.as_slice(),
        flat(&tg),
        seed,
        fault,
    );
    Ok(())
}

/// Runs the suite for `component` on seeds `0..seeds`.
pub fn run_component(component: Component, seeds: u64, inject_fault: bool) -> Result<ComponentReport> {
    let mut checks = BTreeMap::new();
    for seed in 0..seeds {
        match component {
            Component::Losses => loss_checks(seed, inject_fault, &mut checks)?,
            Component::Nn => nn_checks(seed, inject_fault, &mut checks)?,
        }
    }
    Ok(ComponentReport {
        component,
        seeds,
        checks,
    })
}
