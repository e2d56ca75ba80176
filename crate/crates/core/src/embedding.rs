//! Unit-norm embeddings in the shared space.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg3;

/// Vectors shorter than this cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Pose2D,
    Pose3D,
}

impl Modality {
    /// Canonical order used for triplet rows and token storage.
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Pose2D, Modality::Pose3D];

    pub fn index(self) -> usize {
        match self {
            Modality::Image => 0,
            Modality::Pose2D => 1,
            Modality::Pose3D => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Pose2D => "pose2d",
            Modality::Pose3D => "pose3d",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "image" | "img" => Ok(Modality::Image),
            "pose2d" | "2d" => Ok(Modality::Pose2D),
            "pose3d" | "3d" => Ok(Modality::Pose3D),
            other => Err(Error::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("vector contains non-finite values"));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= MIN_NORM {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector of norm {norm:e}"
        )));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Normalizes every row of `m` in place, returning the original row norms.
pub fn normalize_rows(m: &mut Array2<f64>) -> Result<Vec<f64>> {
    let mut norms = Vec::with_capacity(m.nrows());
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() {
            return Err(Error::Numerical(format!("row {i} is not finite")));
        }
        if n <= MIN_NORM {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {n:e} and cannot be normalized"
            )));
        }
        row /= n;
        norms.push(n);
    }
    Ok(norms)
}

/// A point on the unit sphere tagged with the modality it was encoded from.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    modality: Modality,
}

impl Embedding {
    /// Normalizes `values`.
    pub fn new(values: &[f64], modality: Modality) -> Result<Self> {
        Ok(Embedding {
            values: normalize(values)?,
            modality,
        })
    }

    pub fn from_row(row: ArrayView1<'_, f64>, modality: Modality) -> Result<Self> {
        Embedding::new(&row.to_vec(), modality)
    }

    /// Wraps an already unit-norm vector without rescaling it, so the stored
    /// values are bitwise those given.
    pub fn from_unit(values: Vec<f64>, modality: Modality) -> Result<Self> {
        let n = dot(&values, &values).sqrt();
        if !((n - 1.0).abs() <= 1e-9) {
            return Err(Error::invalid(format!("vector has norm {n}, expected 1")));
        }
        Ok(Embedding { values, modality })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two unit vectors, clamped against rounding to `[−1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    dot(&a.values, &b.values).clamp(-1.0, 1.0)
}

/// Mean row-wise cosine between two batches of unit rows (positives share a row).
pub fn mean_positive_cosine(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let n = a.nrows().min(b.nrows());
    if n == 0 {
        return 0.0;
    }
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.dot(&y))
        .sum::<f64>()
        / n as f64
}

/// A candidate (image, 2D, 3D) embedding triple stacked as a 3×D matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletMatrix {
    rows: Array2<f64>,
    indices: [usize; 3],
}

impl TripletMatrix {
    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn indices(&self) -> [usize; 3] {
        self.indices
    }

    /// All three rows come from the same sample.
    pub fn is_positive(&self) -> bool {
        self.indices[0] == self.indices[1] && self.indices[1] == self.indices[2]
    }

    pub fn top_eigenvalue(&self) -> Result<f64> {
        linalg3::top_eigenvalue(self.rows.view())
    }
}

pub fn make_triplet(
    image: &Embedding,
    pose2d: &Embedding,
    pose3d: &Embedding,
    indices: [usize; 3],
) -> Result<TripletMatrix> {
    let d = image.dim();
    if pose2d.dim() != d || pose3d.dim() != d {
        return Err(Error::invalid(format!(
            "embedding dimensions differ: {}, {}, {}",
            d,
            pose2d.dim(),
            pose3d.dim()
        )));
    }
    let parts = [image, pose2d, pose3d];
    for (slot, e) in Modality::ALL.iter().zip(parts) {
        if e.modality != *slot {
            return Err(Error::invalid(format!(
                "triplet slot {slot} received a {} embedding",
                e.modality
            )));
        }
    }
    let rows = Array2::from_shape_fn((3, d), |(r, c)| parts[r].values[c]);
    Ok(TripletMatrix { rows, indices })
}

/// Spherical interpolation at constant angular speed between two embeddings.
pub fn interpolate(a: &Embedding, b: &Embedding, t: f64) -> Result<Embedding> {
    if a.dim() != b.dim() {
        return Err(Error::invalid("cannot interpolate embeddings of different dimension"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolation parameter {t} outside [0, 1]")));
    }
    if a.values.iter().zip(&b.values).all(|(x, y)| *x == -*y) {
        return Err(Error::Degenerate(
            "antipodal endpoints have no unique geodesic".to_string(),
        ));
    }
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(Embedding {
            values: b.values.clone(),
            modality: a.modality,
        });
    }
    let c = dot(&a.values, &b.values).clamp(-1.0, 1.0);
    let theta = c.acos();
    let values: Vec<f64> = if theta < 1e-9 {
        a.values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (1.0 - t) * x + t * y)
            .collect()
    } else {
        let s = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / s;
        let wb = (t * theta).sin() / s;
        a.values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| wa * x + wb * y)
            .collect()
    };
    Embedding::new(&values, a.modality)
}
