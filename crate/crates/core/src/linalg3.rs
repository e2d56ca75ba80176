//! Closed-form linear algebra on 3×3 matrices.
//!
//! Everything the triplet loss and the Procrustes metric need: a symmetric
//! eigensolver, the top eigenvalue of `M Mᵀ` for a 3×D row stack together
//! with its gradient, a 3×3 SVD and similarity Procrustes alignment.
//!
//! Matrices are row-major `[[f64; 3]; 3]`.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Below this eigen-gap `λ₁ − λ₂` the gradient of `λ₁` is treated as undefined.
pub const EIGEN_GAP_THRESHOLD: f64 = 1e-6;

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

#[inline]
pub fn add3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [dot3(&m[0], v), dot3(&m[1], v), dot3(&m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn det3(m: &Mat3) -> f64 {
    dot3(&m[0], &cross3(&m[1], &m[2]))
}

/// Rotation by `angle` radians about the unit axis `axis` (Rodrigues).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let n = norm3(axis);
    if n == 0.0 {
        return IDENTITY;
    }
    let [x, y, z] = scale3(axis, 1.0 / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn rotation_x(a: f64) -> Mat3 {
    axis_angle(&[1.0, 0.0, 0.0], a)
}

pub fn rotation_y(a: f64) -> Mat3 {
    axis_angle(&[0.0, 1.0, 0.0], a)
}

pub fn rotation_z(a: f64) -> Mat3 {
    axis_angle(&[0.0, 0.0, 1.0], a)
}

fn from_columns(c: [Vec3; 3]) -> Mat3 {
    [
        [c[0][0], c[1][0], c[2][0]],
        [c[0][1], c[1][1], c[2][1]],
        [c[0][2], c[1][2], c[2][2]],
    ]
}

/// Real symmetric 3×3 matrix stored as its upper triangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sym3 {
    pub xx: f64,
    pub xy: f64,
    pub xz: f64,
    pub yy: f64,
    pub yz: f64,
    pub zz: f64,
}

impl Sym3 {
    pub const IDENTITY: Sym3 = Sym3::new(1.0, 0.0, 0.0, 1.0, 0.0, 1.0);

    pub const fn new(xx: f64, xy: f64, xz: f64, yy: f64, yz: f64, zz: f64) -> Self {
        Sym3 {
            xx,
            xy,
            xz,
            yy,
            yz,
            zz,
        }
    }

    pub const fn diagonal(d: Vec3) -> Self {
        Sym3::new(d[0], 0.0, 0.0, d[1], 0.0, d[2])
    }

    /// Reads the upper triangle of `m`; the lower triangle is ignored.
    pub fn from_upper(m: &Mat3) -> Self {
        Sym3::new(m[0][0], m[0][1], m[0][2], m[1][1], m[1][2], m[2][2])
    }

    /// `M Mᵀ` for a 3×D row stack.
    pub fn gram(rows: ArrayView2<'_, f64>) -> Result<Self> {
        if rows.nrows() != 3 || rows.ncols() == 0 {
            return Err(Error::invalid(format!(
                "expected a 3×D matrix with D ≥ 1, got {}×{}",
                rows.nrows(),
                rows.ncols()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix contains non-finite values"));
        }
        let (a, b, c) = (rows.row(0), rows.row(1), rows.row(2));
        Ok(Sym3::new(
            a.dot(&a),
            a.dot(&b),
            a.dot(&c),
            b.dot(&b),
            b.dot(&c),
            c.dot(&c),
        ))
    }

    pub fn to_mat(&self) -> Mat3 {
        [
            [self.xx, self.xy, self.xz],
            [self.xy, self.yy, self.yz],
            [self.xz, self.yz, self.zz],
        ]
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy + self.zz
    }

    pub fn is_finite(&self) -> bool {
        [self.xx, self.xy, self.xz, self.yy, self.yz, self.zz]
            .iter()
            .all(|v| v.is_finite())
    }

    fn max_abs(&self) -> f64 {
        [self.xx, self.xy, self.xz, self.yy, self.yz, self.zz]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn scaled(&self, s: f64) -> Self {
        Sym3::new(
            self.xx * s,
            self.xy * s,
            self.xz * s,
            self.yy * s,
            self.yz * s,
            self.zz * s,
        )
    }

    fn apply(&self, v: &Vec3) -> Vec3 {
        [
            self.xx * v[0] + self.xy * v[1] + self.xz * v[2],
            self.xy * v[0] + self.yy * v[1] + self.yz * v[2],
            self.xz * v[0] + self.yz * v[1] + self.zz * v[2],
        ]
    }

    fn quadratic(&self, v: &Vec3) -> f64 {
        dot3(v, &self.apply(v))
    }
}

/// Eigenvalues in descending order with matching unit eigenvectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigSys3 {
    pub values: Vec3,
    pub vectors: [Vec3; 3],
}

/// Unit vector pair spanning the plane orthogonal to the unit vector `w`.
fn orthogonal_complement(w: &Vec3) -> (Vec3, Vec3) {
    let u = if w[0].abs() > w[1].abs() {
        let inv = 1.0 / (w[0] * w[0] + w[2] * w[2]).sqrt();
        [-w[2] * inv, 0.0, w[0] * inv]
    } else {
        let inv = 1.0 / (w[1] * w[1] + w[2] * w[2]).sqrt();
        [0.0, w[2] * inv, -w[1] * inv]
    };
    let v = cross3(w, &u);
    (u, v)
}

/// Eigenvector of a well-separated eigenvalue: the longest cross product of
/// two rows of `S − λI` spans its null space.
fn isolated_eigenvector(s: &Sym3, lambda: f64) -> Vec3 {
    let r0 = [s.xx - lambda, s.xy, s.xz];
    let r1 = [s.xy, s.yy - lambda, s.yz];
    let r2 = [s.xz, s.yz, s.zz - lambda];
    let candidates = [cross3(&r0, &r1), cross3(&r0, &r2), cross3(&r1, &r2)];
    let (best, len2) = candidates
        .iter()
        .map(|c| (*c, dot3(c, c)))
        .fold(([0.0; 3], 0.0), |acc, c| if c.1 > acc.1 { c } else { acc });
    if len2 > 0.0 {
        return scale3(&best, 1.0 / len2.sqrt());
    }
    // S − λI has rank ≤ 1: anything orthogonal to its non-zero row works.
    let row = [r0, r1, r2]
        .into_iter()
        .max_by(|a, b| dot3(a, a).total_cmp(&dot3(b, b)))
        .unwrap_or([1.0, 0.0, 0.0]);
    let n = norm3(&row);
    if n == 0.0 {
        return [1.0, 0.0, 0.0];
    }
    orthogonal_complement(&scale3(&row, 1.0 / n)).0
}

/// Eigenvector for `lambda` inside the plane orthogonal to `known`.
fn complement_eigenvector(s: &Sym3, known: &Vec3, lambda: f64) -> Vec3 {
    let (u, v) = orthogonal_complement(known);
    let su = s.apply(&u);
    let sv = s.apply(&v);
    let a = dot3(&u, &su) - lambda;
    let b = dot3(&u, &sv);
    let c = dot3(&v, &sv) - lambda;
    // Null vector of the 2×2 block [[a, b], [b, c]].
    let p = [b, -a];
    let q = [c, -b];
    let (x, y) = if p[0] * p[0] + p[1] * p[1] >= q[0] * q[0] + q[1] * q[1] {
        (p[0], p[1])
    } else {
        (q[0], q[1])
    };
    let len = (x * x + y * y).sqrt();
    if len == 0.0 {
        return u;
    }
    let e = add3(&scale3(&u, x / len), &scale3(&v, y / len));
    scale3(&e, 1.0 / norm3(&e))
}

/// Closed-form eigendecomposition of a symmetric 3×3 matrix.
///
/// Eigenvalues come from the trigonometric solution of the characteristic
/// cubic; the best-separated eigenvector is recovered by cross products, the
/// second from a 2×2 problem in its orthogonal complement and the third by a
/// cross product. Eigenvalues are finally polished as Rayleigh quotients.
pub fn sym_eig3(s: &Sym3) -> Result<EigSys3> {
    if !s.is_finite() {
        return Err(Error::invalid("symmetric matrix contains non-finite values"));
    }
    let scale = s.max_abs();
    if scale == 0.0 {
        return Ok(EigSys3 {
            values: [0.0; 3],
            vectors: IDENTITY,
        });
    }
    let a = s.scaled(1.0 / scale);
    let q = a.trace() / 3.0;
    let b = Sym3::new(a.xx - q, a.xy, a.xz, a.yy - q, a.yz, a.zz - q);
    let off = a.xy * a.xy + a.xz * a.xz + a.yz * a.yz;
    let p2 = (b.xx * b.xx + b.yy * b.yy + b.zz * b.zz + 2.0 * off) / 6.0;
    if p2 <= f64::EPSILON * f64::EPSILON {
        // Numerically a multiple of the identity.
        let v = q * scale;
        return Ok(EigSys3 {
            values: [v; 3],
            vectors: IDENTITY,
        });
    }
    let p = p2.sqrt();
    let c = b.scaled(1.0 / p);
    let half_det = (det3(&c.to_mat()) * 0.5).clamp(-1.0, 1.0);
    let phi = half_det.acos() / 3.0;
    let two_pi_3 = 2.0 * std::f64::consts::FRAC_PI_3;
    let l_max = q + 2.0 * p * phi.cos();
    let l_min = q + 2.0 * p * (phi + two_pi_3).cos();
    let l_mid = 3.0 * q - l_max - l_min;

    // The eigenvalue farther from the middle one is the isolated one.
    let (first, second) = if half_det >= 0.0 {
        (l_max, l_mid)
    } else {
        (l_min, l_mid)
    };
    let e0 = isolated_eigenvector(&a, first);
    let e1 = complement_eigenvector(&a, &e0, second);
    let e2 = cross3(&e0, &e1);

    let mut pairs = [
        (a.quadratic(&e0) * scale, e0),
        (a.quadratic(&e1) * scale, e1),
        (a.quadratic(&e2) * scale, e2),
    ];
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    Ok(EigSys3 {
        values: [pairs[0].0, pairs[1].0, pairs[2].0],
        vectors: [pairs[0].1, pairs[1].1, pairs[2].1],
    })
}

/// Largest eigenvalue of `M Mᵀ` (the squared top singular value of `M`).
pub fn top_eigenvalue(m: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(sym_eig3(&Sym3::gram(m)?)?.values[0])
}

/// Top eigenpair of `M Mᵀ` together with the eigen-gap `λ₁ − λ₂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopEigen {
    pub value: f64,
    pub gap: f64,
    pub vector: Vec3,
}

impl TopEigen {
    pub fn of_gram(gram: &Sym3) -> Result<Self> {
        let eig = sym_eig3(gram)?;
        Ok(TopEigen {
            value: eig.values[0],
            gap: eig.values[0] - eig.values[1],
            vector: eig.vectors[0],
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.gap <= EIGEN_GAP_THRESHOLD
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TopEigenGrad {
    /// `∂λ₁/∂M = 2 u₁ u₁ᵀ M`.
    Regular { value: f64, grad: Array2<f64> },
    /// `λ₁` is (nearly) repeated; no gradient is defined.
    Degenerate { value: f64, gap: f64 },
}

impl TopEigenGrad {
    pub fn value(&self) -> f64 {
        match self {
            TopEigenGrad::Regular { value, .. } | TopEigenGrad::Degenerate { value, .. } => *value,
        }
    }
}

pub fn top_eigenvalue_grad(m: ArrayView2<'_, f64>) -> Result<TopEigenGrad> {
    let top = TopEigen::of_gram(&Sym3::gram(m)?)?;
    if top.is_degenerate() {
        return Ok(TopEigenGrad::Degenerate {
            value: top.value,
            gap: top.gap,
        });
    }
    let u = top.vector;
    let w = &m.row(0) * u[0] + &m.row(1) * u[1] + &m.row(2) * u[2];
    let mut grad = Array2::zeros(m.raw_dim());
    for (i, mut row) in grad.rows_mut().into_iter().enumerate() {
        row.assign(&(&w * (2.0 * u[i])));
    }
    Ok(TopEigenGrad::Regular {
        value: top.value,
        grad,
    })
}

/// `A = U diag(σ) Vᵀ` with `σ` descending and non-negative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    pub sigma: Vec3,
    pub v: Mat3,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Mat3 {
        let mut us = self.u;
        for row in us.iter_mut() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell *= self.sigma[j];
            }
        }
        mat_mul(&us, &transpose(&self.v))
    }
}

/// SVD of a 3×3 matrix via the eigendecomposition of `AᵀA`.
///
/// `V` is always a proper rotation. `U` is a rotation too unless `det A < 0`,
/// in which case `det U = −1` is forced by the non-negative `σ`.
pub fn svd3(a: &Mat3) -> Result<Svd3> {
    if a.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix contains non-finite values"));
    }
    let at = transpose(a);
    let ata = Sym3::from_upper(&mat_mul(&at, a));
    let eig = sym_eig3(&ata)?;
    let mut v = eig.vectors;
    if det3(&from_columns(v)) < 0.0 {
        v[2] = scale3(&v[2], -1.0);
    }
    let w: [Vec3; 3] = [mat_vec(a, &v[0]), mat_vec(a, &v[1]), mat_vec(a, &v[2])];
    let scale = a.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let tiny = scale * 1e-13;

    let s0 = norm3(&w[0]);
    let u0 = if s0 > tiny {
        scale3(&w[0], 1.0 / s0)
    } else {
        [1.0, 0.0, 0.0]
    };
    let w1 = sub3(&w[1], &scale3(&u0, dot3(&u0, &w[1])));
    let n1 = norm3(&w1);
    let (u1, s1) = if n1 > tiny {
        (scale3(&w1, 1.0 / n1), norm3(&w[1]))
    } else {
        (orthogonal_complement(&u0).0, norm3(&w[1]))
    };
    let mut u2 = cross3(&u0, &u1);
    let mut s2 = dot3(&u2, &w[2]);
    if s2 < 0.0 {
        if s2.abs() > tiny {
            u2 = scale3(&u2, -1.0);
        }
        s2 = s2.abs();
    }
    Ok(Svd3 {
        u: from_columns([u0, u1, u2]),
        sigma: [s0, s1, s2],
        v: from_columns(v),
    })
}

/// `x ↦ s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Mat3,
    pub scale: f64,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            rotation: IDENTITY,
            scale: 1.0,
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        add3(
            &scale3(&mat_vec(&self.rotation, x), self.scale),
            &self.translation,
        )
    }

    pub fn apply_all(&self, xs: &[Vec3]) -> Vec<Vec3> {
        xs.iter().map(|x| self.apply(x)).collect()
    }
}

fn centroid(xs: &[Vec3]) -> Vec3 {
    let sum = xs.iter().fold([0.0; 3], |acc, x| add3(&acc, x));
    scale3(&sum, 1.0 / xs.len() as f64)
}

/// Similarity transform minimising `Σ ‖s R pⱼ + t − qⱼ‖²` (Umeyama).
pub fn procrustes_align(p: &[Vec3], q: &[Vec3]) -> Result<SimilarityTransform> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "point sets differ in size: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.len() < 3 {
        return Err(Error::invalid("procrustes needs at least 3 points"));
    }
    if p.iter().chain(q).flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("point sets contain non-finite values"));
    }
    let n = p.len() as f64;
    let mu_p = centroid(p);
    let mu_q = centroid(q);
    let mut var_p = 0.0;
    let mut cov = [[0.0; 3]; 3];
    for (pj, qj) in p.iter().zip(q) {
        let dp = sub3(pj, &mu_p);
        let dq = sub3(qj, &mu_q);
        var_p += dot3(&dp, &dp);
        for (r, row) in cov.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell += dq[r] * dp[c];
            }
        }
    }
    var_p /= n;
    if !(var_p > 1e-20) {
        return Err(Error::Degenerate(
            "source points are all coincident".to_string(),
        ));
    }
    for cell in cov.iter_mut().flatten() {
        *cell /= n;
    }
    let svd = svd3(&cov)?;
    let d = if det3(&svd.u) * det3(&svd.v) < 0.0 {
        -1.0
    } else {
        1.0
    };
    let mut us = svd.u;
    for row in us.iter_mut() {
        row[2] *= d;
    }
    let rotation = mat_mul(&us, &transpose(&svd.v));
    let scale = (svd.sigma[0] + svd.sigma[1] + d * svd.sigma[2]) / var_p;
    if !(scale > 0.0) {
        return Err(Error::Degenerate(
            "target points are all coincident".to_string(),
        ));
    }
    let translation = sub3(&mu_q, &scale3(&mat_vec(&rotation, &mu_p), scale));
    Ok(SimilarityTransform {
        rotation,
        scale,
        translation,
    })
}
