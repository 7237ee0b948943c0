//! Finite-difference checks of the decoder likelihood, shared by the command
//! line and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{batched_loglik, loglik_and_grad, loglik_and_param_grads};
use crate::error::Result;
use crate::grids::{Grid, Pair, NUM_COLORS};
use crate::model::{Model, DEC};
use crate::nn::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use crate::nn::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderGradcheck {
    pub latent: GradcheckReport,
    /// Spot checks, one report per decoder tensor.
    pub params: Vec<(String, GradcheckReport)>,
    pub passed: bool,
}

fn random_grid<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Grid {
    let cells = (0..rows * cols).map(|_| rng.gen_range(0..NUM_COLORS as u8)).collect();
    Grid::new(rows, cols, cells).expect("sides are within bounds")
}

/// Random pairs with sides of at most 3 (or the layout, when smaller).
pub fn random_small_pairs<R: Rng>(model: &Model, n: usize, rng: &mut R) -> Vec<Pair> {
    let max_r = model.arch.max_rows.min(3);
    let max_c = model.arch.max_cols.min(3);
    (0..n)
        .map(|_| {
            let mut side = |m: usize| rng.gen_range(1..=m);
            let (ri, ci, ro, co) = (side(max_r), side(max_c), side(max_r), side(max_c));
            Pair {
                input: random_grid(ri, ci, rng),
                output: random_grid(ro, co, rng),
            }
        })
        .collect()
}

/// Checks the gradient of the decoder log-likelihood with respect to the
/// latent (every coordinate up to `cfg.samples`) and spot-checks
/// `param_samples` coordinates of every decoder tensor.
pub fn decoder_gradcheck(model: &Model, pairs: usize, param_samples: usize, cfg: &GradcheckConfig) -> Result<DecoderGradcheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pairs = random_small_pairs(model, pairs.max(1), &mut rng);
    let d = model.arch.latent_dim;
    let z: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let (_, gz) = loglik_and_grad(model, &pairs, &z)?;
    let f_z = |t: &Tensor| batched_loglik(model, &pairs, t.data()).unwrap_or(f64::NAN);
    let latent = gradcheck(f_z, &Tensor::new([d], z.clone()), &Tensor::new([d], gz), cfg);

    let (_, grads) = loglik_and_param_grads(model, &pairs, &z)?;
    let spot = GradcheckConfig {
        samples: param_samples,
        ..*cfg
    };
    let mut params = Vec::new();
    for (name, analytic) in grads.iter().filter(|(n, _)| n.starts_with(DEC)) {
        let f_p = |t: &Tensor| {
            let mut probe = model.clone();
            *probe.params.get_mut(name) = t.clone();
            batched_loglik(&probe, &pairs, &z).unwrap_or(f64::NAN)
        };
        let report = gradcheck(f_p, model.params.get(name), analytic, &spot);
        params.push((name.to_string(), report));
    }
    let passed = latent.passed && params.iter().all(|(_, r)| r.passed);
    Ok(DecoderGradcheck { latent, params, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    #[test]
    fn fresh_tiny_model_passes() {
        let mut arch = Preset::Tiny.arch();
        arch.encoder.layers = 1;
        arch.decoder.layers = 1;
        let model = Model::init(arch, 3).unwrap();
        let report = decoder_gradcheck(&model, 2, 3, &GradcheckConfig::default()).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.latent.checked, 2);
        assert!(!report.params.is_empty());
    }
}
