use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use lpn::eval::predict;
use lpn::grids::{load_arc_json, save_arc_solutions, Grid};
use serde_json::{json, Value};

use crate::common::{open_checkpoint, read_file, stored_preset, write_file, InferArgs, Solutions};
use crate::error::{validation, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    /// `{task id: [grid per test input]}` with the first attempt.
    Solutions,
    /// `{task id: [{"attempt_1": grid, "attempt_2": grid}, ...]}`.
    Submission,
}

#[derive(Args, Debug)]
pub struct InferCmdArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// ARC-schema challenges file.
    #[arg(long)]
    pub task: PathBuf,
    /// Only predict this task.
    #[arg(long)]
    pub task_id: Option<String>,
    #[command(flatten)]
    pub infer: InferArgs,
    /// Defaults to `solutions` for one attempt and `submission` for two.
    #[arg(long, value_enum)]
    pub format: Option<OutputFormat>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &InferCmdArgs) -> CliResult {
    let ck = open_checkpoint(&args.checkpoint)?;
    let configs = args.infer.configs(stored_preset(&ck))?;
    let [(label, cfg)] = configs.as_slice() else {
        return validation("infer takes exactly one --infer mode");
    };
    let tasks = load_arc_json(&read_file(&args.task)?)?;
    if let Some(id) = &args.task_id {
        if !tasks.contains_key(id) {
            return validation(format!("no task {id:?} in {}", args.task.display()));
        }
    }
    let mut attempts: BTreeMap<String, Vec<Vec<Grid>>> = BTreeMap::new();
    for (index, (id, task)) in tasks.iter().enumerate() {
        if args.task_id.as_ref().is_some_and(|want| want != id) {
            continue;
        }
        if task.pairs.is_empty() {
            return validation(format!("task {id}: empty specification"));
        }
        if task.queries.is_empty() {
            return validation(format!("task {id}: no test inputs"));
        }
        let inputs: Vec<Grid> = task.queries.iter().map(|q| q.input.clone()).collect();
        let pred = predict(&ck.model, &task.pairs, &inputs, cfg, index as u64)?;
        attempts.insert(id.clone(), pred.attempts);
    }
    let format = args.format.unwrap_or(if cfg.attempts == 2 { OutputFormat::Submission } else { OutputFormat::Solutions });
    let bytes = match format {
        OutputFormat::Solutions => {
            let top1: Solutions = attempts.iter().map(|(id, a)| (id.clone(), a[0].clone())).collect();
            save_arc_solutions(&top1)
        }
        OutputFormat::Submission => {
            let doc: BTreeMap<&String, Vec<Value>> = attempts
                .iter()
                .map(|(id, a)| {
                    let per_query = (0..a[0].len())
                        .map(|q| {
                            let second = a.get(1).unwrap_or(&a[0]);
                            json!({"attempt_1": a[0][q], "attempt_2": second[q]})
                        })
                        .collect();
                    (id, per_query)
                })
                .collect();
            serde_json::to_vec(&doc)?
        }
    };
    write_file(&args.out, &bytes)?;
    println!("{label}: predicted {} tasks into {}", attempts.len(), args.out.display());
    Ok(())
}
