//! Test-time search over the latent space.
//!
//! Given the specification pairs of a task, search looks for the latent that
//! maximizes the decoder's summed log-likelihood of those pairs. It can stop at
//! the encoder's estimate, climb the gradient, or score random candidates.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{batched_loglik, loglik_and_grad};
use crate::encoder::{aggregate_latents, encode_pairs, sample_latent, LatentPosterior};
use crate::error::{Error, Result};
use crate::grids::Pair;
use crate::model::Model;
use crate::nn::optim::{cosine_decay, VecAdam};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    /// Keep the initial latent.
    Mean,
    GradientAscent,
    RandomSearch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentOptimizer {
    Plain,
    Adam { beta1: f32, beta2: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to zero over the step budget.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    EncoderMean,
    EncoderSample,
    Prior,
}

/// Where random-search candidates are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleAround {
    /// `N(0, I)`.
    Prior,
    /// The initial latent plus noise scaled by the posterior spread.
    Posterior,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub method: SearchMethod,
    /// Ascent steps, or the number of random candidates.
    pub steps: usize,
    pub step_size: f32,
    pub optimizer: LatentOptimizer,
    pub schedule: LrSchedule,
    pub init: InitMode,
    pub sample_around: SampleAround,
    /// Return the best visited latent rather than the last one.
    pub track_best: bool,
}

impl SearchConfig {
    pub fn mean() -> Self {
        Self {
            method: SearchMethod::Mean,
            steps: 0,
            step_size: 0.1,
            optimizer: LatentOptimizer::Plain,
            schedule: LrSchedule::Constant,
            init: InitMode::EncoderMean,
            sample_around: SampleAround::Prior,
            track_best: true,
        }
    }

    /// Plain ascent with a constant step, the default for the pattern presets.
    pub fn gradient_ascent(steps: usize, step_size: f32) -> Self {
        Self {
            method: SearchMethod::GradientAscent,
            steps,
            step_size,
            ..Self::mean()
        }
    }

    /// Adam with `beta1 = beta2 = 0.9` and cosine decay from 1.0, the default
    /// for ARC-sized models.
    pub fn adam_cosine(steps: usize) -> Self {
        Self {
            method: SearchMethod::GradientAscent,
            steps,
            step_size: 1.0,
            optimizer: LatentOptimizer::Adam { beta1: 0.9, beta2: 0.9 },
            schedule: LrSchedule::Cosine,
            ..Self::mean()
        }
    }

    pub fn random_search(budget: usize) -> Self {
        Self {
            method: SearchMethod::RandomSearch,
            steps: budget,
            ..Self::mean()
        }
    }

    /// Replaces method and budget from `mean`, `ga:K` or `rs:B`, keeping the
    /// remaining settings.
    pub fn with_infer(mut self, spec: &str) -> Result<Self> {
        let bad = || Error::Config(format!("inference mode {spec:?} is not mean, ga:K or rs:B"));
        match spec.split_once(':') {
            None if spec == "mean" => {
                self.method = SearchMethod::Mean;
                self.steps = 0;
            }
            Some(("ga", k)) => {
                self.method = SearchMethod::GradientAscent;
                self.steps = k.parse().map_err(|_| bad())?;
            }
            Some(("rs", b)) => {
                self.method = SearchMethod::RandomSearch;
                self.steps = b.parse().map_err(|_| bad())?;
            }
            _ => return Err(bad()),
        }
        self.validate()?;
        Ok(self)
    }

    /// Short label such as `ga:100`.
    pub fn label(&self) -> String {
        match self.method {
            SearchMethod::Mean => "mean".into(),
            SearchMethod::GradientAscent => format!("ga:{}", self.steps),
            SearchMethod::RandomSearch => format!("rs:{}", self.steps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            SearchMethod::GradientAscent if !(self.step_size > 0.0 && self.step_size.is_finite()) => {
                Err(Error::Config(format!("step size must be positive, got {}", self.step_size)))
            }
            SearchMethod::RandomSearch if self.steps == 0 => Err(Error::Config("random search budget must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// The latent a search starts from and the posterior spread around it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchStart {
    pub latent: Vec<f32>,
    /// Per-coordinate standard deviation used when sampling around the
    /// posterior: the root mean of the pairs' posterior variances, or ones for
    /// the prior.
    pub spread: Vec<f32>,
}

/// Starting latent from already computed posteriors. `noise` holds one
/// standard-normal vector per posterior and is only read in
/// [`InitMode::EncoderSample`].
pub fn init_from_posteriors(posts: &[LatentPosterior], mode: InitMode, noise: &[Vec<f32>]) -> Result<SearchStart> {
    if posts.is_empty() {
        return Err(Error::EmptySet("no specification pairs"));
    }
    let latents: Vec<Vec<f32>> = match mode {
        InitMode::EncoderMean => posts.iter().map(|p| p.mean.clone()).collect(),
        InitMode::EncoderSample => posts.iter().zip(noise).map(|(p, e)| sample_latent(p, e)).collect(),
        InitMode::Prior => return Err(Error::Config("prior init does not start from posteriors".into())),
    };
    let variances: Vec<Vec<f32>> = posts.iter().map(|p| p.log_var.iter().map(|lv| lv.exp()).collect()).collect();
    let spread = aggregate_latents(&variances)?.into_iter().map(f32::sqrt).collect();
    Ok(SearchStart {
        latent: aggregate_latents(&latents)?,
        spread,
    })
}

/// The starting latent for `pairs`. Encoder modes draw any noise pair by pair
/// from `rng`; the prior mode ignores `pairs`.
pub fn init_latent<R: Rng>(model: &Model, pairs: &[Pair], mode: InitMode, rng: &mut R) -> Result<SearchStart> {
    let d = model.arch.latent_dim;
    if mode == InitMode::Prior {
        return Ok(SearchStart {
            latent: standard_normal(d, rng),
            spread: vec![1.0; d],
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptySet("no specification pairs"));
    }
    let posts = encode_pairs(model, pairs)?;
    let noise: Vec<Vec<f32>> = match mode {
        InitMode::EncoderSample => posts.iter().map(|_| standard_normal(d, rng)).collect(),
        _ => Vec::new(),
    };
    init_from_posteriors(&posts, mode, &noise)
}

pub fn standard_normal<R: Rng>(d: usize, rng: &mut R) -> Vec<f32> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// A visited latent and its objective value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub latent: Vec<f32>,
    pub loglik: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub config: SearchConfig,
    pub init: SearchPoint,
    /// Points visited after the initial one, in order.
    pub trajectory: Vec<SearchPoint>,
    pub best: SearchPoint,
    pub steps_taken: usize,
    /// Set when a non-finite value stopped the search early.
    pub nonfinite: bool,
}

impl SearchReport {
    /// The latent to decode from: the best one, or the last finite one when
    /// best-tracking is off.
    pub fn selected(&self) -> &[f32] {
        if self.config.track_best {
            &self.best.latent
        } else {
            &self.trajectory.last().unwrap_or(&self.init).latent
        }
    }

    /// Running best objective after the initial point and after each step.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = self.init.loglik;
        std::iter::once(best)
            .chain(self.trajectory.iter().map(|p| {
                if p.loglik > best {
                    best = p.loglik;
                }
                best
            }))
            .collect()
    }

    /// Up to `k` visited latents with pairwise distinct values, best first.
    /// Ties keep visiting order.
    pub fn ranked_distinct(&self, k: usize) -> Vec<&SearchPoint> {
        let mut points: Vec<&SearchPoint> = std::iter::once(&self.init).chain(&self.trajectory).collect();
        points.sort_by(|a, b| b.loglik.total_cmp(&a.loglik));
        let mut out: Vec<&SearchPoint> = Vec::with_capacity(k);
        for p in points {
            if out.len() == k {
                break;
            }
            if out.iter().all(|q| q.latent != p.latent) {
                out.push(p);
            }
        }
        out
    }
}

struct Tracker {
    best: SearchPoint,
    trajectory: Vec<SearchPoint>,
}

impl Tracker {
    fn visit(&mut self, latent: Vec<f32>, loglik: f64) {
        if loglik > self.best.loglik {
            self.best = SearchPoint {
                latent: latent.clone(),
                loglik,
            };
        }
        self.trajectory.push(SearchPoint { latent, loglik });
    }
}

/// Searches for the latent maximizing `sum_i log p(y_i | x_i, z)` over
/// `pairs`. Random search draws its candidates from `rng`.
pub fn latent_optimize<R: Rng>(
    model: &Model,
    pairs: &[Pair],
    start: &SearchStart,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<SearchReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptySet("no specification pairs"));
    }
    let d = model.arch.latent_dim;
    if start.latent.len() != d {
        return Err(Error::WrongLatentDim {
            expected: d,
            got: start.latent.len(),
        });
    }
    match cfg.method {
        SearchMethod::Mean => {
            let init = SearchPoint {
                latent: start.latent.clone(),
                loglik: batched_loglik(model, pairs, &start.latent)?,
            };
            Ok(SearchReport {
                config: *cfg,
                best: init.clone(),
                nonfinite: !init.loglik.is_finite(),
                init,
                trajectory: Vec::new(),
                steps_taken: 0,
            })
        }
        SearchMethod::GradientAscent => ascend(model, pairs, &start.latent, cfg),
        SearchMethod::RandomSearch => random_search(model, pairs, start, cfg, rng),
    }
}

fn ascend(model: &Model, pairs: &[Pair], init: &[f32], cfg: &SearchConfig) -> Result<SearchReport> {
    let mut adam = match cfg.optimizer {
        LatentOptimizer::Adam { beta1, beta2 } => Some(VecAdam::new(init.len(), beta1, beta2)),
        LatentOptimizer::Plain => None,
    };
    let mut z = init.to_vec();
    let (init_ll, mut grad) = loglik_and_grad(model, pairs, &z)?;
    let init_point = SearchPoint {
        latent: z.clone(),
        loglik: init_ll,
    };
    let mut t = Tracker {
        best: init_point.clone(),
        trajectory: Vec::with_capacity(cfg.steps),
    };
    let mut nonfinite = !init_ll.is_finite();
    let mut steps_taken = 0;
    for k in 0..cfg.steps {
        if nonfinite || grad.iter().any(|g| !g.is_finite()) {
            nonfinite = true;
            break;
        }
        let lr = match cfg.schedule {
            LrSchedule::Constant => cfg.step_size,
            LrSchedule::Cosine => cosine_decay(cfg.step_size, k, cfg.steps),
        };
        let dir = match adam.as_mut() {
            Some(a) => a.direction(&grad),
            None => grad.clone(),
        };
        let next: Vec<f32> = z.iter().zip(&dir).map(|(zi, di)| zi + lr * di).collect();
        let last = k + 1 == cfg.steps;
        let (next_ll, next_grad) = if last {
            (batched_loglik(model, pairs, &next)?, Vec::new())
        } else {
            loglik_and_grad(model, pairs, &next)?
        };
        if !next_ll.is_finite() || next.iter().any(|v| !v.is_finite()) {
            nonfinite = true;
            break;
        }
        steps_taken += 1;
        t.visit(next.clone(), next_ll);
        (z, grad) = (next, next_grad);
    }
    Ok(SearchReport {
        config: *cfg,
        init: init_point,
        trajectory: t.trajectory,
        best: t.best,
        steps_taken,
        nonfinite,
    })
}

fn random_search<R: Rng>(
    model: &Model,
    pairs: &[Pair],
    start: &SearchStart,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<SearchReport> {
    let d = start.latent.len();
    // Draw every candidate first so the result does not depend on scheduling.
    let candidates: Vec<Vec<f32>> = (0..cfg.steps)
        .map(|_| {
            let e = standard_normal(d, rng);
            match cfg.sample_around {
                SampleAround::Prior => e,
                SampleAround::Posterior => start
                    .latent
                    .iter()
                    .zip(&start.spread)
                    .zip(&e)
                    .map(|((m, s), e)| m + s * e)
                    .collect(),
            }
        })
        .collect();
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|z| batched_loglik(model, pairs, z))
        .collect::<Result<_>>()?;
    let init = SearchPoint {
        latent: start.latent.clone(),
        loglik: batched_loglik(model, pairs, &start.latent)?,
    };
    let mut t = Tracker {
        best: init.clone(),
        trajectory: Vec::with_capacity(cfg.steps),
    };
    let mut nonfinite = !init.loglik.is_finite();
    for (z, ll) in candidates.into_iter().zip(scores) {
        if !ll.is_finite() {
            nonfinite = true;
            break;
        }
        t.visit(z, ll);
    }
    Ok(SearchReport {
        config: *cfg,
        init,
        steps_taken: t.trajectory.len(),
        trajectory: t.trajectory,
        best: t.best,
        nonfinite,
    })
}
