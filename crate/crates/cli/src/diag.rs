use std::path::PathBuf;

use clap::{Args, Subcommand};
use lpn::diagnostics::decoder_gradcheck;
use lpn::eval::latent_traversal;
use lpn::grids::{load_arc_json, Grid};
use lpn::model::{Model, Preset};
use lpn::nn::gradcheck::GradcheckConfig;
use lpn::persistence::write_json;
use lpn::taskgen::{PatternFamilyConfig, TaskFamily, TaskStream};
use lpn::training::TrainConfig;
use serde_json::json;

use crate::common::{artifact_dir, create_dir, open_checkpoint, print_json, read_file, stored_config, write_file};
use crate::error::{validation, CliError, CliResult};

/// A checkpoint, or a freshly initialized preset model.
#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct ModelSource {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args, Debug)]
pub struct InitSeed {
    /// Initialization seed for `--preset`.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
}

struct Loaded {
    model: Model,
    preset: Option<Preset>,
    config: Option<TrainConfig>,
}

impl ModelSource {
    fn load(&self, seed: u64) -> CliResult<Loaded> {
        match (&self.checkpoint, &self.preset) {
            (Some(path), _) => {
                let ck = open_checkpoint(path)?;
                let config = stored_config(&ck);
                let preset = ck.meta.preset.as_deref().and_then(Preset::parse);
                Ok(Loaded {
                    model: ck.model,
                    preset,
                    config,
                })
            }
            (None, Some(name)) => {
                let Some(preset) = Preset::parse(name) else {
                    return validation(format!("unknown preset {name:?}"));
                };
                Ok(Loaded {
                    model: Model::init(preset.arch(), seed)?,
                    preset: Some(preset),
                    config: Some(TrainConfig::from_preset(preset)),
                })
            }
            (None, None) => validation("pass --checkpoint or --preset"),
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum DiagCommand {
    /// Parameter count and the matching reported model size.
    Paramcount {
        #[command(flatten)]
        source: ModelSource,
        /// Fail unless the size is within 2% of the preset's published size.
        #[arg(long)]
        strict: bool,
    },
    /// Finite-difference check of decoder gradients.
    Gradcheck {
        #[command(flatten)]
        source: ModelSource,
        #[command(flatten)]
        init: InitSeed,
        /// Seed for the random pairs, latent and sampled coordinates.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        pairs: usize,
        /// Coordinates probed per decoder tensor.
        #[arg(long, default_value_t = 4)]
        param_samples: usize,
    },
    /// Decodes one input across a lattice of a 2-D latent space.
    Traversal {
        #[command(flatten)]
        source: ModelSource,
        #[command(flatten)]
        init: InitSeed,
        #[arg(long, default_value_t = 8)]
        resolution: usize,
        /// ARC-schema file whose first task's first test input is decoded;
        /// defaults to a generated task.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Pixels per grid cell in the image.
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cmd: &DiagCommand) -> CliResult {
    match cmd {
        DiagCommand::Paramcount { source, strict } => {
            let l = source.load(0)?;
            let count = l.model.param_count();
            let reported = l.model.reported_size();
            let published = l.preset.map(|p| p.reported_size());
            let ratio = published.map(|p| reported as f64 / p);
            print_json(&json!({
                "preset": l.preset.map(|p| p.name()),
                "param_count": count,
                "reported_size": reported,
                "published_size": published,
                "ratio": ratio,
            }))?;
            if *strict {
                match ratio {
                    Some(r) if (r - 1.0).abs() <= 0.02 => {}
                    Some(r) => return Err(CliError::Failed(format!("size ratio {r:.4} outside 1 +/- 0.02"))),
                    None => return validation("--strict needs a known preset"),
                }
            }
            Ok(())
        }
        DiagCommand::Gradcheck {
            source,
            init,
            seed,
            pairs,
            param_samples,
        } => {
            let l = source.load(init.init_seed)?;
            let cfg = GradcheckConfig {
                seed: *seed,
                ..GradcheckConfig::default()
            };
            let report = decoder_gradcheck(&l.model, *pairs, *param_samples, &cfg)?;
            print_json(&json!({"tolerances": cfg, "report": report}))?;
            if report.passed {
                Ok(())
            } else {
                Err(CliError::Failed("analytic and numeric gradients disagree".into()))
            }
        }
        DiagCommand::Traversal {
            source,
            init,
            resolution,
            input,
            scale,
            out,
        } => {
            let l = source.load(init.init_seed)?;
            let grid = match input {
                Some(path) => {
                    let tasks = load_arc_json(&read_file(path)?)?;
                    let first = tasks.values().find_map(|t| t.queries.first().map(|q| q.input.clone()));
                    match first {
                        Some(g) => g,
                        None => return validation(format!("{} has no test input", path.display())),
                    }
                }
                None => default_input(&l)?,
            };
            let traversal = latent_traversal(&l.model, *resolution, &grid)?;
            let dir = artifact_dir(out.as_deref(), "traversal");
            create_dir(&dir)?;
            write_json(&dir.join("traversal.json"), &traversal)?;
            write_file(&dir.join("traversal.ppm"), &traversal.to_ppm(*scale))?;
            println!("wrote {} tiles to {}", traversal.tiles.len(), dir.display());
            Ok(())
        }
    }
}

fn default_input(l: &Loaded) -> CliResult<Grid> {
    let family = match &l.config {
        Some(cfg) => cfg.heldout_family(),
        None => TaskFamily::Pattern(PatternFamilyConfig {
            grid_rows: l.model.arch.max_rows.min(10),
            grid_cols: l.model.arch.max_cols.min(10),
            pattern_rows: 2,
            pattern_cols: 2,
            ..PatternFamilyConfig::default()
        }),
    };
    let stream = TaskStream::new(family).map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(stream.task(0).pairs[0].input.clone())
}
