//! Finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub h: f32,
    pub rel_tol: f32,
    pub abs_tol: f32,
    /// Coordinates to probe; all of them when the point is smaller.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            rel_tol: 1e-2,
            abs_tol: 1e-3,
            samples: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f32,
    pub max_abs_err: f32,
    /// Coordinates that failed both tolerances.
    pub failures: Vec<usize>,
    pub passed: bool,
}

/// Compares `analytic` with central differences of `f` around `point`.
///
/// A coordinate passes when its absolute error is within `abs_tol` or its
/// relative error is within `rel_tol`.
pub fn gradcheck(f: impl Fn(&Tensor) -> f64, point: &Tensor, analytic: &Tensor, cfg: &GradcheckConfig) -> GradcheckReport {
    assert_eq!(point.shape(), analytic.shape(), "gradient shape differs from point");
    let n = point.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords: Vec<usize> = if cfg.samples >= n {
        (0..n).collect()
    } else {
        let mut c = sample(&mut rng, n, cfg.samples).into_vec();
        c.sort_unstable();
        c
    };
    let mut report = GradcheckReport {
        checked: coords.len(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        failures: Vec::new(),
        passed: true,
    };
    for &i in &coords {
        // Divide by the step actually taken after f32 rounding, not by 2h.
        let (hi, lo) = (point.data()[i] + cfg.h, point.data()[i] - cfg.h);
        let probe = |v: f32| {
            let mut p = point.clone();
            p.data_mut()[i] = v;
            f(&p)
        };
        let numeric = ((probe(hi) - probe(lo)) / (hi as f64 - lo as f64)) as f32;
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(f32::MIN_POSITIVE);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(if abs == 0.0 { 0.0 } else { rel });
        if abs > cfg.abs_tol && rel > cfg.rel_tol {
            report.failures.push(i);
        }
    }
    report.passed = report.failures.is_empty();
    report
}
