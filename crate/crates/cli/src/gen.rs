use std::path::PathBuf;

use clap::{Args, ValueEnum};
use lpn::grids::{save_arc_json, save_arc_solutions};
use lpn::taskgen::{PatternFamilyConfig, TaskFamily, TaskStream};

use crate::common::{write_file, Solutions};
use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FamilyFlag {
    Pattern,
    TinyPattern,
    FixedProgram,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(value_enum)]
    pub family: FamilyFlag,
    #[arg(long, default_value_t = 100)]
    pub tasks: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probability that a pattern cell is colored.
    #[arg(long)]
    pub density: Option<f64>,
    /// Specification pairs per task.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Query pairs per task.
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub pattern_size: Option<usize>,
    /// Program shared by every task of the fixed-program family.
    #[arg(long, default_value_t = 0)]
    pub program_seed: u64,
    /// Challenges file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write query outputs to this solutions file and leave them out of
    /// the challenges.
    #[arg(long)]
    pub solutions: Option<PathBuf>,
}

impl GenArgs {
    pub fn family(&self) -> TaskFamily {
        let mut cfg = match self.family {
            FamilyFlag::TinyPattern => PatternFamilyConfig::tiny(),
            FamilyFlag::Pattern | FamilyFlag::FixedProgram => PatternFamilyConfig::default(),
        };
        cfg.seed = self.seed;
        if let Some(d) = self.density {
            cfg.color_density = d;
        }
        if let Some(n) = self.pairs {
            cfg.pairs_per_task = n;
        }
        if let Some(n) = self.queries {
            cfg.queries_per_task = n;
        }
        if let Some(s) = self.grid_size {
            cfg.grid_rows = s;
            cfg.grid_cols = s;
        }
        if let Some(s) = self.pattern_size {
            cfg.pattern_rows = s;
            cfg.pattern_cols = s;
        }
        match self.family {
            FamilyFlag::FixedProgram => TaskFamily::FixedProgram {
                config: cfg,
                program_seed: self.program_seed,
            },
            _ => TaskFamily::Pattern(cfg),
        }
    }
}

pub fn run(args: &GenArgs) -> CliResult {
    let stream = TaskStream::new(args.family()).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut tasks = stream.tasks(0..args.tasks);
    if let Some(path) = &args.solutions {
        let mut solutions = Solutions::new();
        for t in &mut tasks {
            let outputs = t.queries.iter_mut().filter_map(|q| q.output.take()).collect();
            solutions.insert(t.task_id.clone(), outputs);
        }
        write_file(path, &save_arc_solutions(&solutions))?;
    }
    write_file(&args.out, &save_arc_json(&tasks))?;
    println!(
        "wrote {} {} tasks (seed {}) to {}",
        tasks.len(),
        stream.family().name(),
        args.seed,
        args.out.display()
    );
    Ok(())
}
