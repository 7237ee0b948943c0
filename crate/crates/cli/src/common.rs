//! Flag groups and helpers shared by several commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use lpn::grids::{load_arc_json, load_arc_solutions, merge_solutions, TaskInstance};
use lpn::model::Preset;
use lpn::persistence::{load_checkpoint, Checkpoint};
use lpn::search::{InitMode, LatentOptimizer, LrSchedule, SampleAround, SearchConfig};
use lpn::taskgen::TaskStream;
use lpn::training::TrainConfig;
use lpn::eval::InferConfig;

use crate::error::{validation, CliError, CliResult};

pub const ARTIFACTS_ENV: &str = "LPN_ARTIFACTS";

/// `--out` when given, else a directory named `name` under `$LPN_ARTIFACTS`
/// (or `./artifacts`).
pub fn artifact_dir(out: Option<&Path>, name: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(ARTIFACTS_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("artifacts"))
            .join(name),
    }
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    lpn::persistence::write_atomic(path, bytes)?;
    Ok(())
}

/// Loads a checkpoint without optimizer expectations on its architecture.
pub fn open_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(load_checkpoint(path, None)?)
}

/// The training config stored in a checkpoint, when it has one.
pub fn stored_config(ck: &Checkpoint) -> Option<TrainConfig> {
    serde_json::from_value(ck.meta.config.clone()).ok()
}

pub fn stored_preset(ck: &Checkpoint) -> Option<Preset> {
    ck.meta.preset.as_deref().and_then(Preset::parse)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitFlag {
    Encoder,
    Sample,
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerFlag {
    Plain,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScheduleFlag {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AroundFlag {
    Prior,
    Posterior,
}

/// Adam with cosine decay for ARC-sized models, plain ascent with step 0.1
/// for the small presets.
pub fn default_search(preset: Option<Preset>) -> SearchConfig {
    match preset {
        Some(Preset::Arc) => SearchConfig::adam_cosine(0),
        _ => SearchConfig::gradient_ascent(0, 0.1),
    }
}

/// Test-time inference settings.
#[derive(Args, Clone, Debug)]
pub struct InferArgs {
    /// Inference mode: mean, ga:K or rs:B. Repeat to compare several.
    #[arg(long = "infer", default_value = "mean")]
    pub infer: Vec<String>,
    /// Where the search starts.
    #[arg(long, value_enum, default_value_t = InitFlag::Encoder)]
    pub init: InitFlag,
    /// Decoded attempts per query (top-1 or top-2).
    #[arg(long, default_value_t = 1)]
    pub attempts: usize,
    /// Ascent step size; defaults to 1.0 with Adam and 0.1 otherwise.
    #[arg(long)]
    pub step_size: Option<f32>,
    /// Latent optimizer; ARC-sized models default to Adam.
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerFlag>,
    /// Step-size schedule; ARC-sized models default to cosine.
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleFlag>,
    /// Random-search proposal distribution.
    #[arg(long, value_enum, default_value_t = AroundFlag::Prior)]
    pub sample_around: AroundFlag,
    /// Seed for prior draws, encoder samples and random search.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl InferArgs {
    fn base(&self, preset: Option<Preset>) -> SearchConfig {
        let mut s = default_search(preset);
        match self.optimizer {
            Some(OptimizerFlag::Plain) => s.optimizer = LatentOptimizer::Plain,
            Some(OptimizerFlag::Adam) => s.optimizer = LatentOptimizer::Adam { beta1: 0.9, beta2: 0.9 },
            None => {}
        }
        match self.schedule {
            Some(ScheduleFlag::Constant) => s.schedule = LrSchedule::Constant,
            Some(ScheduleFlag::Cosine) => s.schedule = LrSchedule::Cosine,
            None => {}
        }
        s.step_size = match (self.step_size, s.optimizer) {
            (Some(a), _) => a,
            (None, LatentOptimizer::Adam { .. }) => 1.0,
            (None, LatentOptimizer::Plain) => 0.1,
        };
        s.init = match self.init {
            InitFlag::Encoder => InitMode::EncoderMean,
            InitFlag::Sample => InitMode::EncoderSample,
            InitFlag::Prior => InitMode::Prior,
        };
        s.sample_around = match self.sample_around {
            AroundFlag::Prior => SampleAround::Prior,
            AroundFlag::Posterior => SampleAround::Posterior,
        };
        s
    }

    /// One labelled inference config per `--infer` value.
    pub fn configs(&self, preset: Option<Preset>) -> CliResult<Vec<(String, InferConfig)>> {
        let base = self.base(preset);
        let suffix = match self.init {
            InitFlag::Encoder => "",
            InitFlag::Sample => "@sample",
            InitFlag::Prior => "@prior",
        };
        self.infer
            .iter()
            .map(|spec| {
                let search = base.with_infer(spec)?;
                let cfg = InferConfig::new(search, self.attempts, self.seed)?;
                Ok((format!("{}{suffix}", search.label()), cfg))
            })
            .collect()
    }
}

/// Where evaluation tasks come from.
#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// ARC-schema challenges file; without it, held-out tasks are drawn from
    /// the checkpoint's training family.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Solutions file supplying query outputs missing from `--data`.
    #[arg(long, requires = "data")]
    pub solutions: Option<PathBuf>,
    /// Generated tasks to evaluate; with `--data`, keeps the first N tasks.
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Seed of the generated evaluation stream.
    #[arg(long, conflicts_with = "data")]
    pub data_seed: Option<u64>,
    /// Color density of generated tasks.
    #[arg(long, conflicts_with = "data")]
    pub density: Option<f64>,
}

pub const DEFAULT_EVAL_TASKS: usize = 256;

impl DataArgs {
    pub fn load(&self, ck: &Checkpoint) -> CliResult<Vec<TaskInstance>> {
        match &self.data {
            Some(path) => {
                let mut tasks = load_arc_json(&read_file(path)?)?;
                if let Some(sol) = &self.solutions {
                    merge_solutions(&mut tasks, load_arc_solutions(&read_file(sol)?)?)?;
                }
                let mut tasks: Vec<TaskInstance> = tasks.into_values().collect();
                if let Some(n) = self.tasks {
                    tasks.truncate(n);
                }
                Ok(tasks)
            }
            None => {
                let Some(cfg) = stored_config(ck) else {
                    return validation("checkpoint carries no training config; pass --data");
                };
                let mut family = cfg.heldout_family();
                if let Some(seed) = self.data_seed {
                    family.config_mut().seed = seed;
                }
                if let Some(d) = self.density {
                    family.config_mut().color_density = d;
                }
                let stream = TaskStream::new(family).map_err(|e| CliError::Validation(e.to_string()))?;
                Ok(stream.tasks(0..self.tasks.unwrap_or(DEFAULT_EVAL_TASKS) as u64))
            }
        }
    }

    /// Description embedded in artifacts.
    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "data": self.data,
            "solutions": self.solutions,
            "tasks": self.tasks,
            "data_seed": self.data_seed,
            "density": self.density,
        })
    }
}

/// `ga:100@prior` -> `ga-100-prior`, safe as a file name.
pub fn file_label(label: &str) -> String {
    label.replace([':', '@'], "-")
}

pub fn print_json(value: &impl serde::Serialize) -> CliResult {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub type Solutions = BTreeMap<String, Vec<lpn::grids::Grid>>;
