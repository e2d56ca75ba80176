use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Fully connected network: GELU between layers, linear output.
///
/// Parameters live in one flat buffer, layer by layer: the `in × out`
/// weight matrix in row-major order followed by the `out` biases.
#[derive(Clone, Debug)]
pub struct DenseMlp {
    widths: Vec<usize>,
    params: Vec<f64>,
    generation: u64,
}

impl PartialEq for DenseMlp {
    fn eq(&self, other: &Self) -> bool {
        self.widths == other.widths && self.params == other.params
    }
}

/// Activations recorded by [`DenseMlp::forward`].
#[derive(Clone, Debug)]
pub struct MlpCache {
    generation: u64,
    /// Input of each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub params: Vec<f64>,
    pub input: Array2<f64>,
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl DenseMlp {
    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!(
                "an MLP needs at least two positive widths, got {widths:?}"
            )));
        }
        Ok(())
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::from_params(widths, vec![0.0; param_count(widths)])
    }

    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(widths)?;
        let mut off = 0;
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut mlp.params[off..off + w[0] * w[1]] {
                *p = rng.random_range(-bound..bound);
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(mlp)
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        Self::check_widths(widths)?;
        if params.len() != param_count(widths) {
            return Err(Error::invalid(format!(
                "expected {} parameters for widths {widths:?}, got {}",
                param_count(widths),
                params.len()
            )));
        }
        Ok(DenseMlp {
            widths: widths.to_vec(),
            params,
            generation: next_generation(),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates caches from earlier forwards.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.widths[..=layer])
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (i, o) = (self.widths[layer], self.widths[layer + 1]);
        let off = self.layer_offset(layer);
        ArrayView2::from_shape((i, o), &self.params[off..off + i * o]).expect("layout")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (i, o) = (self.widths[layer], self.widths[layer + 1]);
        let off = self.layer_offset(layer) + i * o;
        ArrayView1::from(&self.params[off..off + o])
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input width {} does not match network input {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut a = x.to_owned();
        for l in 0..self.num_layers() {
            let mut z = a.dot(&self.weight(l)) + &self.bias(l);
            if l + 1 < self.num_layers() {
                z.mapv_inplace(gelu);
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers() - 1);
        let mut a = x.to_owned();
        for l in 0..self.num_layers() {
            let z = a.dot(&self.weight(l)) + &self.bias(l);
            inputs.push(a);
            if l + 1 < self.num_layers() {
                a = z.mapv(gelu);
                pre.push(z);
            } else {
                a = z;
            }
        }
        Ok((
            a,
            MlpCache {
                generation: self.generation,
                inputs,
                pre,
            },
        ))
    }

    /// Reverse-mode pass for the forward that produced `cache`.
    pub fn backward(&self, cache: &MlpCache, grad_out: ArrayView2<'_, f64>) -> Result<MlpGrads> {
        if cache.generation != self.generation {
            return Err(Error::InvalidState(
                "activation cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let batch = cache.inputs[0].nrows();
        if grad_out.dim() != (batch, self.output_dim()) {
            return Err(Error::invalid(format!(
                "output gradient has shape {:?}, expected ({batch}, {})",
                grad_out.dim(),
                self.output_dim()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut dz = grad_out.to_owned();
        for l in (0..self.num_layers()).rev() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let off = self.layer_offset(l);
            let dw = cache.inputs[l].t().dot(&dz);
            let db: Array1<f64> = dz.sum_axis(Axis(0));
            grads[off..off + i * o].copy_from_slice(dw.as_slice().expect("standard layout"));
            grads[off + i * o..off + i * o + o].copy_from_slice(db.as_slice().expect("contiguous"));
            let da = dz.dot(&self.weight(l).t());
            if l > 0 {
                let mut next = da;
                next.zip_mut_with(&cache.pre[l - 1], |g, &z| *g *= gelu_grad(z));
                dz = next;
            } else {
                dz = da;
            }
        }
        Ok(MlpGrads {
            params: grads,
            input: dz,
        })
    }
}
