//! `eval`, `ood` and `ablation`.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use lpn::eval::{evaluate_tasks, run_ablation_grid, run_ood_protocol, TrainedRuns};
use lpn::model::Model;
use lpn::persistence::{append_jsonl, write_json};
use lpn::taskgen::PatternFamilyConfig;
use serde_json::json;

use crate::common::{
    artifact_dir, create_dir, file_label, open_checkpoint, print_json, stored_config, stored_preset, write_file, DataArgs, InferArgs,
    DEFAULT_EVAL_TASKS,
};
use crate::error::{validation, CliError, CliResult};

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub infer: InferArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_eval(args: &EvalArgs) -> CliResult {
    let ck = open_checkpoint(&args.checkpoint)?;
    let configs = args.infer.configs(stored_preset(&ck))?;
    let tasks = args.data.load(&ck)?;
    if tasks.is_empty() {
        return validation("no tasks to evaluate");
    }
    let config = json!({
        "checkpoint": args.checkpoint,
        "checkpoint_step": ck.meta.step,
        "dataset": args.data.describe(),
        "tasks": tasks.len(),
        "inference": configs,
    });
    print_json(&config)?;

    let dir = artifact_dir(args.out.as_deref(), "eval");
    create_dir(&dir)?;
    let mut summaries = Vec::new();
    let mut csv = String::from("inference,tasks,top1,top2,query_top1,pixel_acc\n");
    for (label, cfg) in &configs {
        let (results, summary) = evaluate_tasks(&ck.model, &tasks, cfg)?;
        let per_task = dir.join(format!("{}.jsonl", file_label(label)));
        write_file(&per_task, b"")?;
        for r in &results {
            append_jsonl(&per_task, r)?;
        }
        let _ = writeln!(
            csv,
            "{label},{},{:.2},{:.2},{:.2},{:.2}",
            summary.tasks, summary.top1, summary.top2, summary.query_top1, summary.pixel_acc
        );
        println!(
            "{label}: top-1 {:.2}%  top-2 {:.2}%  pixel {:.2}%  ({} tasks)",
            summary.top1, summary.top2, summary.pixel_acc, summary.tasks
        );
        summaries.push(json!({"inference": label, "summary": summary}));
    }
    write_json(&dir.join("summary.json"), &json!({"config": config, "results": summaries}))?;
    write_file(&dir.join("summary.csv"), csv.as_bytes())?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct OodArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pattern color densities to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.75,1.0")]
    pub densities: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_EVAL_TASKS)]
    pub tasks: usize,
    /// Seed of the evaluation stream; defaults to the held-out stream.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[command(flatten)]
    pub infer: InferArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_ood(args: &OodArgs) -> CliResult {
    let ck = open_checkpoint(&args.checkpoint)?;
    let configs = args.infer.configs(stored_preset(&ck))?;
    let mut base = match stored_config(&ck) {
        Some(cfg) => cfg.heldout_family().config().clone(),
        None => PatternFamilyConfig {
            grid_rows: ck.model.arch.max_rows.min(10),
            grid_cols: ck.model.arch.max_cols.min(10),
            ..PatternFamilyConfig::default()
        },
    };
    if let Some(s) = args.data_seed {
        base.seed = s;
    }
    let table = run_ood_protocol(&ck.model, &base, &args.densities, &configs, args.tasks)?;
    print!("{}", table.to_csv());
    let dir = artifact_dir(args.out.as_deref(), "ood");
    create_dir(&dir)?;
    write_json(&dir.join("ood.json"), &json!({"checkpoint": args.checkpoint, "table": table}))?;
    write_file(&dir.join("ood.csv"), table.to_csv().as_bytes())?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    /// Training method and its checkpoints, one per seed:
    /// `label=a.ckpt,b.ckpt`. Repeat for each method.
    #[arg(long = "run", required = true)]
    pub runs: Vec<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub infer: InferArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_ablation(args: &AblationArgs) -> CliResult {
    let mut loaded: Vec<(String, Vec<(u64, Model, PathBuf)>)> = Vec::new();
    let mut first = None;
    for spec in &args.runs {
        let Some((label, paths)) = spec.split_once('=') else {
            return validation(format!("--run {spec:?} is not label=ckpt[,ckpt...]"));
        };
        let mut models = Vec::new();
        for p in paths.split(',').filter(|p| !p.is_empty()) {
            let path = PathBuf::from(p);
            let ck = open_checkpoint(&path)?;
            if let Some((_, arch)) = &first {
                if *arch != ck.model.arch {
                    return Err(CliError::Validation(format!("checkpoint mismatch: {} has a different architecture", path.display())));
                }
            }
            models.push((ck.meta.seed, ck.model.clone(), path));
            if first.is_none() {
                first = Some((ck.clone(), ck.model.arch));
            }
        }
        if models.is_empty() {
            return validation(format!("--run {label} lists no checkpoints"));
        }
        loaded.push((label.to_string(), models));
    }
    let (ck, _) = first.expect("at least one run");
    let configs = args.infer.configs(stored_preset(&ck))?;
    let tasks = args.data.load(&ck)?;
    let runs: Vec<TrainedRuns<'_>> = loaded
        .iter()
        .map(|(label, models)| TrainedRuns {
            label: label.clone(),
            models: models.iter().map(|(s, m, _)| (*s, m)).collect(),
        })
        .collect();
    let config = json!({
        "runs": loaded.iter().map(|(l, ms)| json!({"label": l, "checkpoints": ms.iter().map(|m| &m.2).collect::<Vec<_>>()})).collect::<Vec<_>>(),
        "dataset": args.data.describe(),
        "tasks": tasks.len(),
        "inference": configs,
    });
    print_json(&config)?;
    let table = run_ablation_grid(&runs, &configs, &tasks, config)?;
    print!("{}", table.to_csv());
    let dir = artifact_dir(args.out.as_deref(), "ablation");
    create_dir(&dir)?;
    write_json(&dir.join("ablation.json"), &table)?;
    write_file(&dir.join("ablation.csv"), table.to_csv().as_bytes())?;
    Ok(())
}
