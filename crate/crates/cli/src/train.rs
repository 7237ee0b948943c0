use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use lpn::eval::{evaluate_tasks, EvalSummary};
use lpn::model::{Model, Preset};
use lpn::nn::optim::OptimState;
use lpn::persistence::{append_jsonl, save_checkpoint, write_json, CheckpointMeta};
use lpn::search::SearchConfig;
use lpn::taskgen::TaskStream;
use lpn::training::{InnerMode, StepReport, TrainConfig, Trainer};
use serde_json::{json, Value};

use crate::common::{artifact_dir, default_search, create_dir, open_checkpoint, print_json, read_file, stored_config};
use crate::error::{validation, CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InnerModeFlag {
    /// Inner updates are constants for the parameter gradient.
    Stop,
    /// Differentiate through the inner updates.
    Meta,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Named hyperparameter set: overfit, pattern, tiny, ood or arc.
    #[arg(long)]
    pub preset: Option<String>,
    /// JSON file merged over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue a run from this checkpoint, optimizer included.
    #[arg(long, conflicts_with = "finetune_from")]
    pub resume: Option<PathBuf>,
    /// Start from these weights and train `--steps` more steps.
    #[arg(long)]
    pub finetune_from: Option<PathBuf>,
    /// Discard the optimizer moments of `--finetune-from`.
    #[arg(long, requires = "finetune_from")]
    pub reset_optimizer: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    /// Specification pairs per task.
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub kl_coeff: Option<f32>,
    /// Latent ascent steps inside each training reconstruction.
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long, value_enum)]
    pub inner_mode: Option<InnerModeFlag>,
    #[arg(long)]
    pub inner_lr: Option<f32>,
    /// Seeds initialization and reparameterization noise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the training task stream.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Color density of training patterns.
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub eval_tasks: Option<usize>,
    /// Inference modes reported at each evaluation. Repeatable.
    #[arg(long)]
    pub eval_infer: Vec<String>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Run directory; defaults to a directory under `$LPN_ARTIFACTS`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub dry_run: bool,
}

/// Merges `over` into `base`: objects key by key, anything else replaced.
pub fn deep_merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_preset(name: &str) -> CliResult<Preset> {
    Preset::parse(name).ok_or_else(|| {
        CliError::Validation(format!("unknown preset {name:?}; expected overfit, pattern, tiny, ood or arc"))
    })
}

impl TrainArgs {
    /// Preset (or the config of the checkpoint being continued), then the
    /// config file, then flags.
    pub fn resolve(&self, from_checkpoint: Option<TrainConfig>) -> CliResult<TrainConfig> {
        let file: Option<Value> = match &self.config {
            Some(p) => Some(serde_json::from_slice(&read_file(p)?)?),
            None => None,
        };
        let file_preset = file.as_ref().and_then(|f| f.get("preset")).and_then(Value::as_str);
        let mut base = match (&self.preset, file_preset, from_checkpoint) {
            (Some(p), _, _) => serde_json::to_value(TrainConfig::from_preset(parse_preset(p)?))?,
            (None, Some(p), _) => serde_json::to_value(TrainConfig::from_preset(parse_preset(p)?))?,
            (None, None, Some(cfg)) => serde_json::to_value(cfg)?,
            (None, None, None) if file.is_some() => serde_json::to_value(TrainConfig::from_preset(Preset::Pattern))?,
            (None, None, None) => return validation("pass --preset or --config"),
        };
        if let Some(f) = file {
            deep_merge(&mut base, f);
        }
        let mut cfg: TrainConfig = serde_json::from_value(base).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        self.apply_flags(&mut cfg);
        cfg.validate()?;
        for spec in &cfg.eval_infer {
            SearchConfig::mean().with_infer(spec)?;
        }
        Ok(cfg)
    }

    fn apply_flags(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag {
                    cfg.$($field)+ = v;
                }
            };
        }
        set!(steps => steps);
        set!(batch_size => batch_size);
        set!(micro_batch => micro_batch);
        set!(lr => optim.lr);
        set!(kl_coeff => kl_coeff);
        set!(inner_steps => inner_steps);
        set!(inner_lr => inner_lr);
        set!(seed => seed);
        set!(eval_every => eval_every);
        set!(eval_tasks => eval_tasks);
        set!(checkpoint_every => checkpoint_every);
        if let Some(n) = self.pairs {
            cfg.pairs = n;
            cfg.family.config_mut().pairs_per_task = n;
        }
        if let Some(m) = self.inner_mode {
            cfg.inner_mode = match m {
                InnerModeFlag::Stop => InnerMode::StopGradient,
                InnerModeFlag::Meta => InnerMode::MetaGradient,
            };
        }
        if let Some(s) = self.data_seed {
            cfg.family.config_mut().seed = s;
        }
        if let Some(d) = self.density {
            cfg.family.config_mut().color_density = d;
        }
        if !self.eval_infer.is_empty() {
            cfg.eval_infer = self.eval_infer.clone();
        }
    }
}

fn run_name(cfg: &TrainConfig) -> String {
    let preset = cfg.preset.map_or("custom", |p| p.name());
    let mode = match (cfg.inner_steps, cfg.inner_mode) {
        (0, _) => "mean".to_string(),
        (k, InnerMode::StopGradient) => format!("ga{k}"),
        (k, InnerMode::MetaGradient) => format!("ga{k}g"),
    };
    format!("train-{preset}-{mode}-seed{}", cfg.seed)
}

fn meta(cfg: &TrainConfig, step: u64) -> CliResult<CheckpointMeta> {
    Ok(CheckpointMeta {
        step,
        seed: cfg.seed,
        preset: cfg.preset.map(|p| p.name().to_string()),
        config: serde_json::to_value(cfg)?,
    })
}

struct Run {
    dir: PathBuf,
    metrics: PathBuf,
    started: Instant,
    heldout: Vec<lpn::grids::TaskInstance>,
}

impl Run {
    fn checkpoint(&self, t: &Trainer, name: &str) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        save_checkpoint(&path, &t.model, Some(&t.opt), &meta(&t.cfg, t.step())?)?;
        Ok(path)
    }

    fn evaluate(&self, t: &Trainer) -> CliResult<Value> {
        let mut results = serde_json::Map::new();
        for spec in &t.cfg.eval_infer {
            let search = default_search(t.cfg.preset).with_infer(spec)?;
            let infer = lpn::eval::InferConfig::new(search, 1, t.cfg.seed)?;
            let (_, summary): (_, EvalSummary) = evaluate_tasks(&t.model, &self.heldout, &infer)?;
            results.insert(spec.clone(), serde_json::to_value(summary)?);
        }
        Ok(Value::Object(results))
    }

    fn observe(&self, t: &Trainer, r: &StepReport) -> CliResult {
        let record = json!({
            "kind": "step",
            "step": r.step,
            "loss": r.loss.total,
            "rec": r.loss.rec,
            "kl": r.loss.kl,
            "grad_norm": r.grad_norm,
            "clip_scale": r.clip_scale,
            "inner_grad_calls": r.inner_grad_calls,
            "elapsed_s": self.started.elapsed().as_secs_f64(),
        });
        append_jsonl(&self.metrics, &record)?;
        let cfg = &t.cfg;
        let last = r.step == cfg.steps;
        if cfg.eval_every > 0 && cfg.eval_tasks > 0 && (r.step % cfg.eval_every == 0 || last) {
            let results = self.evaluate(t)?;
            eprintln!("step {}: eval {}", r.step, results);
            append_jsonl(&self.metrics, &json!({"kind": "eval", "step": r.step, "results": results}))?;
        }
        if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 && !last {
            self.checkpoint(t, &format!("step-{:08}.ckpt", r.step))?;
            self.checkpoint(t, "latest.ckpt")?;
        }
        if r.step % 10 == 0 || r.step == 1 || last {
            eprintln!(
                "step {}: loss {:.4} (rec {:.4}, kl {:.4}) grad norm {:.3}",
                r.step, r.loss.total, r.loss.rec, r.loss.kl, r.grad_norm
            );
        }
        Ok(())
    }
}

fn write_manifest(dir: &Path, cfg: &TrainConfig, args: &TrainArgs, start_step: u64) -> CliResult {
    let manifest = json!({
        "command": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "seeds": {
            "model_and_noise": cfg.seed,
            "task_stream": cfg.family.config().seed,
            "heldout_stream": cfg.heldout_family().config().seed,
        },
        "start_step": start_step,
        "resume": args.resume,
        "finetune_from": args.finetune_from,
        "reset_optimizer": args.reset_optimizer,
        "param_count": Model::init(cfg.arch, 0).map(|m| m.param_count()).ok(),
    });
    write_json(&dir.join(if start_step == 0 { "manifest.json".into() } else { format!("manifest-from-{start_step}.json") }), &manifest)?;
    Ok(())
}

pub fn run(args: &TrainArgs) -> CliResult {
    let source = args.resume.as_ref().or(args.finetune_from.as_ref());
    let ck = source.map(|p| open_checkpoint(p)).transpose()?;
    let mut cfg = args.resolve(ck.as_ref().and_then(stored_config))?;
    let (model, opt) = match ck {
        Some(ck) => {
            if ck.model.arch != cfg.arch {
                return Err(CliError::Validation(
                    "checkpoint mismatch: checkpoint architecture differs from the resolved config".into(),
                ));
            }
            let opt = match ck.opt {
                Some(o) if !args.reset_optimizer => o,
                _ => OptimState::new(&ck.model.params),
            };
            (ck.model, opt)
        }
        None => {
            let model = Model::init(cfg.arch, cfg.seed)?;
            let opt = OptimState::new(&model.params);
            (model, opt)
        }
    };
    if args.finetune_from.is_some() {
        cfg.steps += opt.step;
    }
    print_json(&cfg)?;
    if args.dry_run {
        return Ok(());
    }

    let dir = artifact_dir(args.out.as_deref(), &run_name(&cfg));
    create_dir(&dir)?;
    let start_step = opt.step;
    write_manifest(&dir, &cfg, args, start_step)?;
    let heldout = TaskStream::new(cfg.heldout_family())
        .map_err(|e| CliError::Validation(e.to_string()))?
        .tasks(0..cfg.eval_tasks as u64);
    let run = Run {
        metrics: dir.join("metrics.jsonl"),
        dir,
        started: Instant::now(),
        heldout,
    };
    let mut trainer = Trainer::new(model, opt, cfg)?;
    eprintln!(
        "training {} parameters from step {} to {} in {}",
        trainer.model.param_count(),
        start_step,
        trainer.cfg.steps,
        run.dir.display()
    );

    let mut observer_error = None;
    let outcome = trainer.run(|t, r| {
        run.observe(t, r).map_err(|e| {
            let msg = e.to_string();
            observer_error = Some(e);
            lpn::Error::Config(msg)
        })
    });
    if let Some(e) = observer_error {
        return Err(e);
    }
    match outcome {
        Ok(()) => {
            let path = run.checkpoint(&trainer, "final.ckpt")?;
            run.checkpoint(&trainer, "latest.ckpt")?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Err(lpn::Error::Nn(lpn::nn::NnError::NonFinite(what))) => {
            // The failed step left the weights untouched.
            let path = run.checkpoint(&trainer, "last-good.ckpt")?;
            append_jsonl(&run.metrics, &json!({"kind": "abort", "step": trainer.step(), "reason": what}))?;
            Err(CliError::Numerical(format!(
                "non-finite {what}; last good weights (step {}) in {}",
                trainer.step(),
                path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}
