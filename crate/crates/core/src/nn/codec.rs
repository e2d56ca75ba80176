//! Encoders (MLP followed by row normalization) and token-conditioned decoders.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::embedding::{normalize_rows, Modality};
use crate::error::{Error, Result};
use crate::nn::mlp::{DenseMlp, MlpCache, MlpGrads};

#[derive(Clone, Debug)]
pub struct EncodeCache {
    mlp: MlpCache,
    embeddings: Array2<f64>,
    norms: Vec<f64>,
}

pub fn encode(model: &DenseMlp, raw: ArrayView2<'_, f64>) -> Result<(Array2<f64>, EncodeCache)> {
    let (mut out, mlp) = model.forward(raw)?;
    let norms = normalize_rows(&mut out)?;
    let cache = EncodeCache {
        mlp,
        embeddings: out.clone(),
        norms,
    };
    Ok((out, cache))
}

/// Encodes without keeping activations.
pub fn embed(model: &DenseMlp, raw: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = model.predict(raw)?;
    normalize_rows(&mut out)?;
    Ok(out)
}

/// Backpropagates through `y = v / ‖v‖` and then the network.
pub fn encode_backward(
    model: &DenseMlp,
    cache: &EncodeCache,
    grad_embeddings: ArrayView2<'_, f64>,
) -> Result<MlpGrads> {
    if grad_embeddings.dim() != cache.embeddings.dim() {
        return Err(Error::invalid("embedding gradient shape mismatch"));
    }
    let mut dv = grad_embeddings.to_owned();
    for ((mut g, y), n) in dv
        .rows_mut()
        .into_iter()
        .zip(cache.embeddings.rows())
        .zip(&cache.norms)
    {
        let proj = g.dot(&y);
        g.scaled_add(-proj, &y);
        g /= *n;
    }
    model.backward(&cache.mlp, dv.view())
}

/// One learned vector per source modality, added to embeddings before decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationToken {
    values: Array2<f64>,
}

impl RepresentationToken {
    pub fn zeros(dim: usize) -> Self {
        RepresentationToken {
            values: Array2::zeros((3, dim)),
        }
    }

    /// Small random tokens (`±scale`).
    pub fn random<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Self {
        RepresentationToken {
            values: if scale > 0.0 {
                Array2::from_shape_simple_fn((3, dim), || rng.random_range(-scale..scale))
            } else {
                Array2::zeros((3, dim))
            },
        }
    }

    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != 3 {
            return Err(Error::invalid("a representation token has exactly three rows"));
        }
        Ok(RepresentationToken {
            values: values.as_standard_layout().to_owned(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.values.as_slice_mut().expect("standard layout")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoseKind {
    TwoD,
    ThreeD,
}

impl PoseKind {
    pub fn coords(self) -> usize {
        match self {
            PoseKind::TwoD => 2,
            PoseKind::ThreeD => 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecodeCache {
    mlp: MlpCache,
    source: Modality,
    token_used: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeGrads {
    pub params: Vec<f64>,
    pub embeddings: Array2<f64>,
    /// Gradient for the full 3×D token; only the source row is non-zero.
    pub token: Option<Array2<f64>>,
}

fn decoder_input(
    model: &DenseMlp,
    emb: ArrayView2<'_, f64>,
    token: Option<&RepresentationToken>,
    source: Modality,
    target: PoseKind,
) -> Result<Array2<f64>> {
    if model.output_dim() % target.coords() != 0 {
        return Err(Error::invalid(format!(
            "decoder output {} is not a whole number of {}-D joints",
            model.output_dim(),
            target.coords()
        )));
    }
    let mut input = emb.to_owned();
    if let Some(tok) = token {
        if tok.dim() != emb.ncols() {
            return Err(Error::invalid("token dimension differs from embedding dimension"));
        }
        input += &tok.values.row(source.index());
    }
    Ok(input)
}

/// Decodes embeddings to flattened poses (`B × J·K`).
///
/// With a token, the decoder sees `emb + token[source]`; without one the
/// output does not depend on `source`.
pub fn decode(
    model: &DenseMlp,
    emb: ArrayView2<'_, f64>,
    token: Option<&RepresentationToken>,
    source: Modality,
    target: PoseKind,
) -> Result<(Array2<f64>, DecodeCache)> {
    let input = decoder_input(model, emb, token, source, target)?;
    let (out, mlp) = model.forward(input.view())?;
    Ok((
        out,
        DecodeCache {
            mlp,
            source,
            token_used: token.is_some(),
        },
    ))
}

pub fn predict_pose(
    model: &DenseMlp,
    emb: ArrayView2<'_, f64>,
    token: Option<&RepresentationToken>,
    source: Modality,
    target: PoseKind,
) -> Result<Array2<f64>> {
    let input = decoder_input(model, emb, token, source, target)?;
    model.predict(input.view())
}

pub fn decode_backward(
    model: &DenseMlp,
    cache: &DecodeCache,
    grad_pose: ArrayView2<'_, f64>,
) -> Result<DecodeGrads> {
    let g = model.backward(&cache.mlp, grad_pose)?;
    let token = cache.token_used.then(|| {
        let mut t = Array2::zeros((3, g.input.ncols()));
        t.row_mut(cache.source.index())
            .assign(&g.input.sum_axis(ndarray::Axis(0)));
        t
    });
    Ok(DecodeGrads {
        params: g.params,
        embeddings: g.input,
        token,
    })
}
