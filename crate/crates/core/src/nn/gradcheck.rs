use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates beyond this count are sub-sampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub worst_index: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    /// Combines reports, keeping the worst error.
    pub fn merge(&self, other: &GradCheckReport) -> GradCheckReport {
        let checked = self.checked + other.checked;
        let mean = if checked == 0 {
            0.0
        } else {
            (self.mean_rel_err * self.checked as f64 + other.mean_rel_err * other.checked as f64)
                / checked as f64
        };
        let (max_rel_err, worst_index) = if other.max_rel_err > self.max_rel_err {
            (other.max_rel_err, other.worst_index)
        } else {
            (self.max_rel_err, self.worst_index)
        };
        GradCheckReport {
            checked,
            max_rel_err,
            mean_rel_err: mean,
            worst_index,
            tolerance: self.tolerance.min(other.tolerance),
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `f` around `params`.
pub fn gradient_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    opts: GradCheckOptions,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let coords: Vec<usize> = if params.len() > opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut c = index::sample(&mut rng, params.len(), opts.max_coords).into_vec();
        c.sort_unstable();
        c
    } else {
        (0..params.len()).collect()
    };
    let mut x = params.to_vec();
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    let mut sum = 0.0;
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + opts.step;
        let plus = f(&x);
        x[i] = orig - opts.step;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let err = relative_error(analytic[i], numeric);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        sum += err;
        if err > max_rel_err {
            max_rel_err = err;
            worst_index = i;
        }
    }
    GradCheckReport {
        checked: coords.len(),
        max_rel_err,
        mean_rel_err: if coords.is_empty() { 0.0 } else { sum / coords.len() as f64 },
        worst_index,
        tolerance: opts.tolerance,
    }
}
