//! End-to-end training of encoder and decoder.
//!
//! For every pair `i` of a task, the latents sampled from the other pairs are
//! averaged, optionally refined by a few gradient steps on the other pairs'
//! log-likelihood, and used to reconstruct `y_i`. The loss adds a KL penalty
//! pulling each pair's posterior toward `N(0, I)`.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::loglik_on_tape;
use crate::encoder::{encode_on_tape, LatentPosterior};
use crate::error::{Error, Result};
use crate::grids::{Grid, TaskInstance};
use crate::model::{ArchConfig, Model, Preset};
use crate::nn::optim::{adamw_step, AdamWConfig, OptimState};
use crate::nn::{Bound, NnError, ParamStore, Tape, Tensor, Var};
use crate::search::standard_normal;
use crate::taskgen::{PatternFamilyConfig, TaskFamily, TaskGenError, TaskStream};

const HELDOUT_SALT: u64 = 0x6865_6c64_6f75_74;

/// How gradients treat the inner latent updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMode {
    /// Each update is a constant offset; parameters see only the starting
    /// latent and the final decode.
    StopGradient,
    /// Differentiate through the updates (second order).
    MetaGradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Option<Preset>,
    pub arch: ArchConfig,
    pub family: TaskFamily,
    pub steps: u64,
    /// Tasks per step.
    pub batch_size: usize,
    /// Pairs per task.
    pub pairs: usize,
    /// Tasks per gradient micro-batch; bounds memory, not the result.
    pub micro_batch: usize,
    /// Latent ascent steps per reconstruction; 0 is mean training.
    pub inner_steps: usize,
    pub inner_mode: InnerMode,
    pub inner_lr: f32,
    pub kl_coeff: f32,
    pub optim: AdamWConfig,
    /// Seeds model init and the reparameterization noise.
    pub seed: u64,
    pub eval_every: u64,
    pub eval_tasks: usize,
    /// Inference modes reported at each evaluation, as `mean`, `ga:K`, `rs:B`.
    pub eval_infer: Vec<String>,
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn from_preset(preset: Preset) -> Self {
        let t = preset.training();
        let arch = preset.arch();
        let base = PatternFamilyConfig {
            pairs_per_task: t.pairs,
            ..PatternFamilyConfig::default()
        };
        let family = match preset {
            Preset::Overfit => TaskFamily::FixedProgram {
                config: base,
                program_seed: 0,
            },
            Preset::Tiny => TaskFamily::Pattern(PatternFamilyConfig {
                pairs_per_task: t.pairs,
                ..PatternFamilyConfig::tiny()
            }),
            Preset::Pattern | Preset::Ood | Preset::Arc => TaskFamily::Pattern(base),
        };
        Self {
            preset: Some(preset),
            arch,
            family,
            steps: t.steps as u64,
            batch_size: t.batch_size,
            pairs: t.pairs,
            micro_batch: 8,
            inner_steps: 0,
            inner_mode: InnerMode::StopGradient,
            inner_lr: 0.1,
            kl_coeff: t.kl_coeff,
            optim: AdamWConfig {
                lr: t.lr,
                clip_norm: Some(t.clip_norm),
                ..AdamWConfig::default()
            },
            seed: 0,
            eval_every: 1000,
            eval_tasks: 256,
            eval_infer: vec!["mean".into(), "ga:100".into()],
            checkpoint_every: 1000,
        }
    }

    /// The training family with a different seed, for evaluation on tasks
    /// never drawn during training. Fixed-program families keep their
    /// program.
    pub fn heldout_family(&self) -> TaskFamily {
        let mut family = self.family.clone();
        family.config_mut().seed ^= HELDOUT_SALT;
        family
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.arch.validate()?;
        self.family.validate().map_err(|e: TaskGenError| Error::Config(e.0))?;
        if self.pairs < 2 {
            return bad(format!("leave-one-out needs at least 2 pairs per task, got {}", self.pairs));
        }
        if self.family.config().pairs_per_task != self.pairs {
            return bad(format!(
                "task family yields {} pairs per task but training uses {}",
                self.family.config().pairs_per_task,
                self.pairs
            ));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return bad("batch and micro-batch sizes must be positive".into());
        }
        if !(self.kl_coeff >= 0.0 && self.inner_lr.is_finite() && self.optim.lr > 0.0) {
            return bad("kl_coeff must be non-negative and lr positive".into());
        }
        let cfg = self.family.config();
        if cfg.grid_rows > self.arch.max_rows || cfg.grid_cols > self.arch.max_cols {
            return bad(format!(
                "task grids {}x{} exceed the model layout {}x{}",
                cfg.grid_rows, cfg.grid_cols, self.arch.max_rows, self.arch.max_cols
            ));
        }
        Ok(())
    }
}

/// `0.5 * sum_k (mean_k^2 + exp(log_var_k) - 1 - log_var_k)`.
pub fn kl_gaussian(post: &LatentPosterior) -> f64 {
    0.5 * post
        .mean
        .iter()
        .zip(&post.log_var)
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            m * m + lv.exp() - 1.0 - lv
        })
        .sum::<f64>()
}

/// Per-row KL divergence to the standard normal, `[rows]`.
fn kl_on_tape<'t>(mean: Var<'t>, log_var: Var<'t>) -> Var<'t> {
    let rows = mean.shape()[0];
    mean.square()
        .add(log_var.exp())
        .sub(log_var)
        .add_scalar(-1.0)
        .sum_last()
        .reshape(&[rows])
        .scale(0.5)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean negative log-likelihood per reconstructed pair.
    pub rec: f64,
    /// Mean KL per pair.
    pub kl: f64,
}

impl LossBreakdown {
    fn new(rec: f64, kl: f64, beta: f32) -> Self {
        Self {
            total: rec + beta as f64 * kl,
            rec,
            kl,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Optimizer step after the update.
    pub step: u64,
    pub loss: LossBreakdown,
    pub grad_norm: f32,
    pub clip_scale: f32,
    /// Number of inner latent-gradient evaluations performed.
    pub inner_grad_calls: usize,
}

/// Reparameterization noise for one task, one vector per pair. Keyed by the
/// task's global index so any batching draws the same values.
pub fn task_noise(seed: u64, task_index: u64, pairs: usize, latent_dim: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65u64);
    rng.set_stream(task_index);
    (0..pairs).map(|_| standard_normal(latent_dim, &mut rng)).collect()
}

struct Forward<'t> {
    /// Starting latents `[rows, d]` before any inner step.
    init: Var<'t>,
    /// Negative log-likelihood per reconstructed pair, `[rows]`.
    nll: Var<'t>,
    kl: Var<'t>,
    inner_grad_calls: usize,
}

fn check_batch(tasks: &[TaskInstance], n: usize) -> Result<()> {
    for t in tasks {
        if t.pairs.len() != n {
            return Err(NnError::ShapeMismatch(format!(
                "task {:?} has {} pairs, training expects {n}",
                t.task_id,
                t.pairs.len()
            ))
            .into());
        }
    }
    Ok(())
}

fn rc(v: Vec<usize>) -> Rc<[usize]> {
    Rc::from(v)
}

/// Leave-one-out mean: row `(b, i)` averages rows `(b, j)` for `j != i`,
/// always summed in increasing `j`.
fn leave_one_out<'t>(z: Var<'t>, tasks: usize, n: usize) -> Var<'t> {
    let mut acc: Option<Var<'t>> = None;
    for s in 0..n - 1 {
        let idx: Vec<usize> = (0..tasks)
            .flat_map(|b| (0..n).map(move |i| b * n + if s < i { s } else { s + 1 }))
            .collect();
        let g = z.gather_rows(rc(idx));
        acc = Some(match acc {
            None => g,
            Some(a) => a.add(g),
        });
    }
    acc.expect("n >= 2").scale(1.0 / (n - 1) as f32)
}

/// The pairs each row's inner objective sums over and the row owning them.
fn context<'a>(tasks: &'a [TaskInstance], n: usize) -> (Vec<(&'a Grid, &'a Grid)>, Vec<usize>) {
    let mut pairs = Vec::with_capacity(tasks.len() * n * (n - 1));
    let mut owner = Vec::with_capacity(pairs.capacity());
    for (b, t) in tasks.iter().enumerate() {
        for i in 0..n {
            for (j, p) in t.pairs.iter().enumerate() {
                if j != i {
                    pairs.push((&p.input, &p.output));
                    owner.push(b * n + i);
                }
            }
        }
    }
    (pairs, owner)
}

fn forward<'t>(
    tape: &'t Tape,
    p: &Bound<'t>,
    params: &ParamStore,
    cfg: &TrainConfig,
    tasks: &[TaskInstance],
    noise: &[Vec<Vec<f32>>],
) -> Result<Forward<'t>> {
    let (n, d) = (cfg.pairs, cfg.arch.latent_dim);
    let own: Vec<(&Grid, &Grid)> = tasks
        .iter()
        .flat_map(|t| t.pairs.iter().map(|p| (&p.input, &p.output)))
        .collect();
    let rows = own.len();
    let (mean, log_var) = encode_on_tape(p, &cfg.arch, &own)?;
    let eps: Vec<f32> = noise.iter().flatten().flatten().copied().collect();
    assert_eq!(eps.len(), rows * d, "noise must hold one vector per pair");
    let eps = tape.constant(Tensor::new(vec![rows, d], eps));
    let z = mean.add(eps.mul(log_var.scale(0.5).exp()));
    let init = leave_one_out(z, tasks.len(), n);

    let mut zc = init;
    let mut calls = 0;
    if cfg.inner_steps > 0 {
        let (ctx, owner) = context(tasks, n);
        let owner = rc(owner);
        for _ in 0..cfg.inner_steps {
            let g = match cfg.inner_mode {
                InnerMode::StopGradient => {
                    let inner = Tape::new();
                    let pi = params.bind(&inner, false);
                    let zi = inner.var(zc.value());
                    let ll = loglik_on_tape(&pi, &cfg.arch, &ctx, zi.gather_rows(Rc::clone(&owner)))?.sum();
                    tape.constant(inner.grad(ll, &[zi], None, false)[0].value())
                }
                InnerMode::MetaGradient => {
                    let ll = loglik_on_tape(p, &cfg.arch, &ctx, zc.gather_rows(Rc::clone(&owner)))?.sum();
                    tape.grad(ll, &[zc], None, true)[0]
                }
            };
            calls += 1;
            zc = zc.add(g.scale(cfg.inner_lr));
        }
    }
    let nll = loglik_on_tape(p, &cfg.arch, &own, zc)?.neg();
    Ok(Forward {
        init,
        nll,
        kl: kl_on_tape(mean, log_var),
        inner_grad_calls: calls,
    })
}

/// Starting latent of every pair, before inner steps: for pair `i` of a task,
/// the mean of the other pairs' reparameterized samples.
pub fn leave_one_out_latents(model: &Model, cfg: &TrainConfig, tasks: &[TaskInstance], noise: &[Vec<Vec<f32>>]) -> Result<Vec<Vec<f32>>> {
    check_batch(tasks, cfg.pairs)?;
    let tape = Tape::inference();
    let p = model.params.bind(&tape, false);
    let cfg = TrainConfig {
        inner_steps: 0,
        ..cfg.clone()
    };
    let f = forward(&tape, &p, &model.params, &cfg, tasks, noise)?;
    let v = f.init.value();
    Ok(v.data().chunks_exact(cfg.arch.latent_dim).map(<[f32]>::to_vec).collect())
}

struct MicroResult {
    grads: ParamStore,
    nll_sum: f64,
    kl_sum: f64,
    calls: usize,
}

fn micro_step(model: &Model, cfg: &TrainConfig, tasks: &[TaskInstance], noise: &[Vec<Vec<f32>>], weight: f32) -> Result<MicroResult> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, true);
    let f = forward(&tape, &p, &model.params, cfg, tasks, noise)?;
    assert_eq!(f.nll.shape(), f.kl.shape());
    let loss = f.nll.add(f.kl.scale(cfg.kl_coeff)).sum().scale(weight);
    let (nll, kl) = (f.nll.value(), f.kl.value());
    Ok(MicroResult {
        grads: p.grads(loss),
        nll_sum: nll.data().iter().map(|&v| v as f64).sum(),
        kl_sum: kl.data().iter().map(|&v| v as f64).sum(),
        calls: f.inner_grad_calls,
    })
}

fn accumulate(into: &mut ParamStore, from: &ParamStore) {
    for (name, t) in into.iter_mut() {
        let src = from.get(name);
        for (a, b) in t.data_mut().iter_mut().zip(src.data()) {
            *a += b;
        }
    }
}

/// Loss and parameter gradient for a batch, averaged over every pair.
pub fn loss_and_grads(model: &Model, cfg: &TrainConfig, tasks: &[TaskInstance], noise: &[Vec<Vec<f32>>]) -> Result<(LossBreakdown, ParamStore, usize)> {
    check_batch(tasks, cfg.pairs)?;
    if tasks.is_empty() {
        return Err(Error::EmptySet("empty training batch"));
    }
    if model.arch != cfg.arch {
        return Err(Error::CheckpointMismatch("model architecture differs from the training config".into()));
    }
    let rows = (tasks.len() * cfg.pairs) as f64;
    let weight = (1.0 / rows) as f32;
    let chunks: Vec<(&[TaskInstance], &[Vec<Vec<f32>>])> = tasks
        .chunks(cfg.micro_batch)
        .zip(noise.chunks(cfg.micro_batch))
        .collect();
    let results: Vec<MicroResult> = chunks
        .into_par_iter()
        .map(|(t, e)| micro_step(model, cfg, t, e, weight))
        .collect::<Result<_>>()?;
    let mut iter = results.into_iter();
    let first = iter.next().expect("non-empty batch");
    let (mut grads, mut nll, mut kl, mut calls) = (first.grads, first.nll_sum, first.kl_sum, first.calls);
    for r in iter {
        accumulate(&mut grads, &r.grads);
        nll += r.nll_sum;
        kl += r.kl_sum;
        calls += r.calls;
    }
    Ok((LossBreakdown::new(nll / rows, kl / rows, cfg.kl_coeff), grads, calls))
}

/// One optimizer update on `tasks`, whose first task has global index
/// `first_index`. On a non-finite loss or gradient the model and optimizer are
/// left untouched.
pub fn train_step(model: &mut Model, opt: &mut OptimState, cfg: &TrainConfig, tasks: &[TaskInstance], first_index: u64) -> Result<StepReport> {
    let noise: Vec<Vec<Vec<f32>>> = (0..tasks.len() as u64)
        .map(|t| task_noise(cfg.seed, first_index + t, cfg.pairs, cfg.arch.latent_dim))
        .collect();
    let (loss, grads, calls) = loss_and_grads(model, cfg, tasks, &noise)?;
    if !loss.total.is_finite() {
        return Err(NnError::NonFinite(format!(
            "loss at step {} (rec {}, kl {})",
            opt.step + 1,
            loss.rec,
            loss.kl
        ))
        .into());
    }
    let stats = adamw_step(&mut model.params, &grads, opt, &cfg.optim)?;
    Ok(StepReport {
        step: opt.step,
        loss,
        grad_norm: stats.grad_norm,
        clip_scale: stats.clip_scale,
        inner_grad_calls: calls,
    })
}

/// Owns the model, optimizer and data stream of a run.
pub struct Trainer {
    pub model: Model,
    pub opt: OptimState,
    pub cfg: TrainConfig,
    stream: TaskStream,
}

impl Trainer {
    pub fn new(model: Model, opt: OptimState, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.arch != cfg.arch {
            return Err(Error::CheckpointMismatch("model architecture differs from the training config".into()));
        }
        let stream = TaskStream::new(cfg.family.clone()).map_err(|e| Error::Config(e.0))?;
        Ok(Self { model, opt, cfg, stream })
    }

    /// Fresh model and optimizer from `cfg.seed`.
    pub fn init(cfg: TrainConfig) -> Result<Self> {
        let model = Model::init(cfg.arch.clone(), cfg.seed)?;
        let opt = OptimState::new(&model.params);
        Self::new(model, opt, cfg)
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Trains on the batch belonging to the current step.
    pub fn step_once(&mut self) -> Result<StepReport> {
        let first = self.opt.step * self.cfg.batch_size as u64;
        let tasks = self.stream.tasks(first..first + self.cfg.batch_size as u64);
        train_step(&mut self.model, &mut self.opt, &self.cfg, &tasks, first)
    }

    /// Steps until `cfg.steps`, calling `observe` after each one. An error
    /// from `observe` stops the run.
    pub fn run(&mut self, mut observe: impl FnMut(&Trainer, &StepReport) -> Result<()>) -> Result<()> {
        while self.opt.step < self.cfg.steps {
            let report = self.step_once()?;
            observe(self, &report)?;
        }
        Ok(())
    }
}

/// Continues training a model for `cfg.steps` more steps, typically with
/// inner steps switched on. `reset_optimizer` discards the moments.
pub fn finetune_with_inner_steps(
    model: Model,
    opt: OptimState,
    cfg: &TrainConfig,
    reset_optimizer: bool,
    observe: impl FnMut(&Trainer, &StepReport) -> Result<()>,
) -> Result<(Model, OptimState)> {
    if model.arch != cfg.arch {
        return Err(Error::CheckpointMismatch(
            "checkpoint architecture differs from the fine-tuning config".into(),
        ));
    }
    let opt = if reset_optimizer { OptimState::new(&model.params) } else { opt };
    let mut run_cfg = cfg.clone();
    run_cfg.steps = opt.step + cfg.steps;
    let mut trainer = Trainer::new(model, opt, run_cfg)?;
    trainer.run(observe)?;
    Ok((trainer.model, trainer.opt))
}
