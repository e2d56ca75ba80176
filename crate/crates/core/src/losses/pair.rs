use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// One-directional InfoNCE between two aligned batches, with gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_source: Array2<f64>,
    pub grad_target: Array2<f64>,
    pub grad_tau: f64,
}

pub(crate) fn check_batch(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "{what}: batch shapes differ ({:?} vs {:?})",
            a.dim(),
            b.dim()
        )));
    }
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::invalid(format!("{what}: empty batch")));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite embedding values")));
    }
    Ok(())
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// Row-wise log-sum-exp and softmax of a logit matrix.
pub(crate) fn softmax_rows(logits: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let mut probs = logits.clone();
    let mut lse = Array1::zeros(logits.nrows());
    for (mut row, l) in probs.axis_iter_mut(Axis(0)).zip(lse.iter_mut()) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|x| (x - m).exp()).sum();
        *l = m + sum.ln();
        let shift = *l;
        row.mapv_inplace(|x| (x - shift).exp());
    }
    (lse, probs)
}

/// InfoNCE with source rows as anchors and target rows as candidates:
/// the mean over anchors `b` of `−log softmax_b(s_b · t_i / τ)[b]`.
pub fn info_nce_pair(
    source: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<PairLoss> {
    check_batch(source, target, "pair loss")?;
    check_tau(tau)?;
    let b = source.nrows();
    let logits = source.dot(&target.t()) / tau;
    let (lse, mut dlogits) = softmax_rows(&logits);
    let loss = (0..b).map(|i| lse[i] - logits[[i, i]]).sum::<f64>() / b as f64;

    for i in 0..b {
        dlogits[[i, i]] -= 1.0;
    }
    dlogits /= b as f64;
    let grad_tau = -(&dlogits * &logits).sum() / tau;
    let grad_source = dlogits.dot(&target) / tau;
    let grad_target = dlogits.t().dot(&source) / tau;
    Ok(PairLoss {
        loss,
        grad_source,
        grad_target,
        grad_tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_sample_batch_has_zero_loss() {
        let x = array![[0.6, 0.8]];
        let l = info_nce_pair(x.view(), x.view(), 0.1).unwrap();
        assert_eq!(l.loss, 0.0);
    }

    #[test]
    fn two_orthogonal_rows_at_unit_temperature() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let l = info_nce_pair(x.view(), x.view(), 1.0).unwrap();
        // Direct two-term softmax: −log(e / (e + 1)).
        let e = std::f64::consts::E;
        let direct = -(e / (e + 1.0)).ln();
        assert!((l.loss - direct).abs() < 1e-15);
        assert!((l.loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Array2::<f64>::zeros((3, 4));
        let b = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            info_nce_pair(a.view(), b.view(), 1.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(info_nce_pair(a.view(), a.view(), 0.0).is_err());
    }
}
