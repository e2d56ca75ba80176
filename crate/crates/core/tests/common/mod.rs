//! Independent reference implementations used as test oracles. None of these
//! call into the library's numerical code.

#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

pub type V3 = [f64; 3];
pub type M3 = [[f64; 3]; 3];

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn unit_rows<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = gaussian(rng, rows, cols);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

pub fn random_sym<R: Rng + ?Sized>(rng: &mut R) -> M3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v: f64 = rng.sample(StandardNormal);
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    m
}

/// Cyclic Jacobi rotations; eigenvalues sorted descending.
pub fn jacobi_eigenvalues(a: &M3, sweeps: usize) -> V3 {
    let mut a = *a;
    for _ in 0..sweeps {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A ← Jᵀ A J with J the (p, q) rotation.
            let mut b = a;
            for k in 0..3 {
                b[k][p] = c * a[k][p] - s * a[k][q];
                b[k][q] = s * a[k][p] + c * a[k][q];
            }
            let mut r = b;
            for k in 0..3 {
                r[p][k] = c * b[p][k] - s * b[q][k];
                r[q][k] = s * b[p][k] + c * b[q][k];
            }
            a = r;
        }
    }
    let mut d = [a[0][0], a[1][1], a[2][2]];
    d.sort_by(|x, y| y.total_cmp(x));
    d
}

pub fn gram(m: ArrayView2<'_, f64>) -> M3 {
    let mut g = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            g[i][j] = m.row(i).dot(&m.row(j));
        }
    }
    g
}

/// `σ₁²` of a 3×D matrix by power iteration on `MᵀM`, applied as `Mᵀ(M v)`.
pub fn power_iteration_sigma1_sq(m: ArrayView2<'_, f64>) -> f64 {
    // Iterates on the 3×3 Gram M Mᵀ, whose top eigenvalue is σ₁².
    let g = gram(m);
    let mut v = [1.0, 0.93, 0.71];
    let mut est = 0.0;
    let mut stable = 0;
    for _ in 0..200_000 {
        let w: V3 = std::array::from_fn(|r| (0..3).map(|c| g[r][c] * v[c]).sum());
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let rq = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / vv;
        let n: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        v = w.map(|x| x / n);
        if (rq - est).abs() <= 1e-16 * rq.abs() {
            stable += 1;
            if stable >= 3 {
                return rq;
            }
        } else {
            stable = 0;
        }
        est = rq;
    }
    est
}

pub fn matmul3(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Rotation from a random axis and angle (Rodrigues).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> M3 {
    let mut axis: V3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
    let n = (axis[0].powi(2) + axis[1].powi(2) + axis[2].powi(2)).sqrt();
    for a in &mut axis {
        *a /= n;
    }
    let angle: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    [
        [c + x * x * (1.0 - c), x * y * (1.0 - c) - z * s, x * z * (1.0 - c) + y * s],
        [y * x * (1.0 - c) + z * s, c + y * y * (1.0 - c), y * z * (1.0 - c) - x * s],
        [z * x * (1.0 - c) - y * s, z * y * (1.0 - c) + x * s, c + z * z * (1.0 - c)],
    ]
}

pub fn random_pose<R: Rng + ?Sized>(rng: &mut R, joints: usize) -> Vec<V3> {
    (0..joints)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect()
}

pub fn similarity(pose: &[V3], s: f64, r: &M3, t: &V3) -> Vec<V3> {
    pose.iter()
        .map(|p| {
            let mut o = [0.0; 3];
            for i in 0..3 {
                o[i] = s * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) + t[i];
            }
            o
        })
        .collect()
}

/// Mean per-joint distance by explicit summation.
pub fn mpjpe_direct(a: &[V3], b: &[V3]) -> f64 {
    let mut total = 0.0;
    for j in 0..a.len() {
        let mut sq = 0.0;
        for c in 0..3 {
            sq += (a[j][c] - b[j][c]) * (a[j][c] - b[j][c]);
        }
        total += sq.sqrt();
    }
    total / a.len() as f64
}

/// Every triple in `[0, b)³` that contains `anchor` in its own slot for at
/// least one modality, except the anchor's positive triple.
pub fn enumerate_pool(b: usize, anchor: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for i in 0..b {
        for j in 0..b {
            for k in 0..b {
                let t = [i, j, k];
                if t != [anchor; 3] && t.contains(&anchor) {
                    out.push(t);
                }
            }
        }
    }
    out
}

/// Indices sorted by descending score, ties to the lower index, by full sort.
pub fn brute_force_ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Pinhole projection through the 3×4 matrix `K [R | t]` on homogeneous
/// coordinates, followed by square-box normalization of the pixel coordinates.
pub fn homogeneous_projection(pose: &[V3], focal: f64, principal: [f64; 2], r: &M3, t: &V3) -> Vec<[f64; 2]> {
    let k = [[focal, 0.0, principal[0]], [0.0, focal, principal[1]], [0.0, 0.0, 1.0]];
    let mut rt = [[0.0; 4]; 3];
    for i in 0..3 {
        rt[i][..3].copy_from_slice(&r[i]);
        rt[i][3] = t[i];
    }
    let mut p = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..4 {
            p[i][j] = (0..3).map(|m| k[i][m] * rt[m][j]).sum();
        }
    }
    let px: Vec<[f64; 2]> = pose
        .iter()
        .map(|x| {
            let h = [x[0], x[1], x[2], 1.0];
            let y: Vec<f64> = (0..3).map(|i| (0..4).map(|j| p[i][j] * h[j]).sum()).collect();
            [y[0] / y[2], y[1] / y[2]]
        })
        .collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for q in &px {
        for c in 0..2 {
            lo[c] = lo[c].min(q[c]);
            hi[c] = hi[c].max(q[c]);
        }
    }
    let size = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    px.iter()
        .map(|q| [(q[0] - center[0]) / size + 0.5, (q[1] - center[1]) / size + 0.5])
        .collect()
}

/// Layer-by-layer MLP evaluation with explicit loops over a flat parameter
/// buffer laid out as `in × out` row-major weights followed by biases.
pub fn mlp_reference(widths: &[usize], params: &[f64], x: &[f64]) -> Vec<f64> {
    let gelu = |v: f64| {
        0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
    };
    let mut h = x.to_vec();
    let mut off = 0;
    let layers = widths.len() - 1;
    for l in 0..layers {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let w = &params[off..off + n_in * n_out];
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let mut out = vec![0.0; n_out];
        for o in 0..n_out {
            let mut s = b[o];
            for i in 0..n_in {
                s += h[i] * w[i * n_out + o];
            }
            out[o] = if l + 1 < layers { gelu(s) } else { s };
        }
        h = out;
    }
    h
}

/// One-directional InfoNCE by direct summation over anchors and candidates.
pub fn pair_loss_direct(s: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>, tau: f64) -> f64 {
    let b = s.nrows();
    let mut loss = 0.0;
    for i in 0..b {
        let mut denom = 0.0;
        for j in 0..b {
            denom += (s.row(i).dot(&t.row(j)) / tau).exp();
        }
        loss += -((s.row(i).dot(&t.row(i)) / tau).exp() / denom).ln();
    }
    loss / b as f64
}

/// Triplet InfoNCE over explicit negative lists, with every `λ₁` from the
/// Jacobi oracle.
pub fn triplet_loss_direct(
    x: [ArrayView2<'_, f64>; 3],
    tau: f64,
    negatives: &[Vec<[usize; 3]>],
) -> f64 {
    let b = x[0].nrows();
    let lambda = |t: [usize; 3]| {
        let m = Array2::from_shape_fn((3, x[0].ncols()), |(r, c)| x[r][[t[r], c]]);
        jacobi_eigenvalues(&gram(m.view()), 100)[0]
    };
    let mut loss = 0.0;
    for (a, negs) in negatives.iter().enumerate() {
        let pos = (lambda([a; 3]) / tau).exp();
        let denom: f64 = pos + negs.iter().map(|&t| (lambda(t) / tau).exp()).sum::<f64>();
        loss += -(pos / denom).ln();
    }
    loss / b as f64
}

/// Central differences of `f` at every coordinate of `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let o = p[i];
            p[i] = o + h;
            let up = f(&p);
            p[i] = o - h;
            let down = f(&p);
            p[i] = o;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], n: &[f64]) -> f64 {
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
