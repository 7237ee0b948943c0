//! Synthetic pattern-pasting task families.
//!
//! Every task in the Pattern family shares one randomly drawn pattern across
//! its pairs. Each input is black except for one marker pixel; the output is
//! black with the pattern pasted so that its top-left corner sits on the
//! marker. Generation is a pure function of `(config, seed, task index)`:
//! task `k` of a stream always draws from its own ChaCha sub-stream, so any
//! partition of indices across workers reproduces the same tasks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grids::{Grid, Pair, Query, TaskInstance};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid task family config: {0}")]
pub struct TaskGenError(pub String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternFamilyConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub pattern_rows: usize,
    pub pattern_cols: usize,
    /// Probability that a pattern cell is colored rather than black.
    pub color_density: f64,
    pub marker_color: u8,
    pub pairs_per_task: usize,
    /// Held-out query pairs appended to each task (outputs included).
    pub queries_per_task: usize,
    pub seed: u64,
}

impl Default for PatternFamilyConfig {
    fn default() -> Self {
        Self {
            grid_rows: 10,
            grid_cols: 10,
            pattern_rows: 4,
            pattern_cols: 4,
            color_density: 0.5,
            marker_color: 1,
            pairs_per_task: 4,
            queries_per_task: 1,
            seed: 0,
        }
    }
}

impl PatternFamilyConfig {
    /// 4x4 grids with 2x2 patterns.
    pub fn tiny() -> Self {
        Self {
            grid_rows: 4,
            grid_cols: 4,
            pattern_rows: 2,
            pattern_cols: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TaskGenError> {
        let err = |m: String| Err(TaskGenError(m));
        if !(1..=30).contains(&self.grid_rows) || !(1..=30).contains(&self.grid_cols) {
            return err(format!("grid {}x{} outside 1..=30", self.grid_rows, self.grid_cols));
        }
        if self.pattern_rows == 0
            || self.pattern_cols == 0
            || self.pattern_rows > self.grid_rows
            || self.pattern_cols > self.grid_cols
        {
            return err(format!(
                "pattern {}x{} must fit in grid {}x{}",
                self.pattern_rows, self.pattern_cols, self.grid_rows, self.grid_cols
            ));
        }
        if !(0.0..=1.0).contains(&self.color_density) {
            return err(format!("color density {} outside [0, 1]", self.color_density));
        }
        if self.marker_color > 9 {
            return err(format!("marker color {} is not a color", self.marker_color));
        }
        if self.pairs_per_task == 0 {
            return err("pairs_per_task must be at least 1".into());
        }
        Ok(())
    }

    /// Number of legal top-left marker positions.
    pub fn marker_positions(&self) -> usize {
        (self.grid_rows - self.pattern_rows + 1) * (self.grid_cols - self.pattern_cols + 1)
    }
}

/// A pattern_rows x pattern_cols block of colors; 0 is black.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pattern {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<u8>,
}

/// Draws each cell independently: colored (uniform over 1..=9) with
/// probability `color_density`, else black.
pub fn draw_pattern<R: Rng>(cfg: &PatternFamilyConfig, rng: &mut R) -> Pattern {
    let cells = (0..cfg.pattern_rows * cfg.pattern_cols)
        .map(|_| {
            if rng.gen_bool(cfg.color_density) {
                rng.gen_range(1..=9u8)
            } else {
                0
            }
        })
        .collect();
    Pattern {
        rows: cfg.pattern_rows,
        cols: cfg.pattern_cols,
        cells,
    }
}

/// Input/output pair for a marker at `(r, c)`.
pub fn paste_pair(cfg: &PatternFamilyConfig, pattern: &Pattern, r: usize, c: usize) -> Pair {
    let mut input = vec![0u8; cfg.grid_rows * cfg.grid_cols];
    input[r * cfg.grid_cols + c] = cfg.marker_color;
    let mut output = vec![0u8; cfg.grid_rows * cfg.grid_cols];
    for i in 0..pattern.rows {
        for j in 0..pattern.cols {
            output[(r + i) * cfg.grid_cols + c + j] = pattern.cells[i * pattern.cols + j];
        }
    }
    Pair {
        input: Grid::new(cfg.grid_rows, cfg.grid_cols, input).expect("validated config"),
        output: Grid::new(cfg.grid_rows, cfg.grid_cols, output).expect("validated config"),
    }
}

fn sample_marker<R: Rng>(cfg: &PatternFamilyConfig, rng: &mut R) -> (usize, usize) {
    let r = rng.gen_range(0..=cfg.grid_rows - cfg.pattern_rows);
    let c = rng.gen_range(0..=cfg.grid_cols - cfg.pattern_cols);
    (r, c)
}

fn pairs_for<R: Rng>(cfg: &PatternFamilyConfig, pattern: &Pattern, rng: &mut R) -> (Vec<Pair>, Vec<Query>) {
    let pairs = (0..cfg.pairs_per_task)
        .map(|_| {
            let (r, c) = sample_marker(cfg, rng);
            paste_pair(cfg, pattern, r, c)
        })
        .collect();
    let queries = (0..cfg.queries_per_task)
        .map(|_| {
            let (r, c) = sample_marker(cfg, rng);
            let p = paste_pair(cfg, pattern, r, c);
            Query {
                input: p.input,
                output: Some(p.output),
            }
        })
        .collect();
    (pairs, queries)
}

/// One Pattern task: a fresh pattern, then independent markers per pair.
pub fn sample_pattern_task<R: Rng>(cfg: &PatternFamilyConfig, rng: &mut R) -> TaskInstance {
    let pattern = draw_pattern(cfg, rng);
    let (pairs, queries) = pairs_for(cfg, &pattern, rng);
    TaskInstance {
        task_id: String::new(),
        pairs,
        queries,
    }
}

/// Pattern task on 4x4 grids with 2x2 patterns.
pub fn sample_tiny_pattern_task<R: Rng>(rng: &mut R) -> TaskInstance {
    sample_pattern_task(&PatternFamilyConfig::tiny(), rng)
}

/// The single pattern owned by `program_seed`.
pub fn fixed_program_pattern(cfg: &PatternFamilyConfig, program_seed: u64) -> Pattern {
    draw_pattern(cfg, &mut ChaCha8Rng::seed_from_u64(program_seed))
}

/// A task whose pattern is fixed by `program_seed`; only markers vary.
pub fn fixed_program_family<R: Rng>(cfg: &PatternFamilyConfig, program_seed: u64, rng: &mut R) -> TaskInstance {
    let pattern = fixed_program_pattern(cfg, program_seed);
    let (pairs, queries) = pairs_for(cfg, &pattern, rng);
    TaskInstance {
        task_id: String::new(),
        pairs,
        queries,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskFamily {
    Pattern(PatternFamilyConfig),
    FixedProgram {
        config: PatternFamilyConfig,
        program_seed: u64,
    },
}

impl TaskFamily {
    pub fn name(&self) -> &'static str {
        match self {
            TaskFamily::Pattern(c) if c.grid_rows == 4 && c.pattern_rows == 2 => "tiny-pattern",
            TaskFamily::Pattern(_) => "pattern",
            TaskFamily::FixedProgram { .. } => "fixed-program",
        }
    }

    pub fn config(&self) -> &PatternFamilyConfig {
        match self {
            TaskFamily::Pattern(c) | TaskFamily::FixedProgram { config: c, .. } => c,
        }
    }

    pub fn config_mut(&mut self) -> &mut PatternFamilyConfig {
        match self {
            TaskFamily::Pattern(c) | TaskFamily::FixedProgram { config: c, .. } => c,
        }
    }

    pub fn validate(&self) -> Result<(), TaskGenError> {
        self.config().validate()
    }
}

/// Deterministic, index-addressable sequence of tasks from one family.
#[derive(Clone, Debug)]
pub struct TaskStream {
    family: TaskFamily,
}

impl TaskStream {
    pub fn new(family: TaskFamily) -> Result<Self, TaskGenError> {
        family.validate()?;
        Ok(Self { family })
    }

    pub fn family(&self) -> &TaskFamily {
        &self.family
    }

    /// Random state for task `index`; independent of every other index.
    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.family.config().seed);
        rng.set_stream(index);
        rng
    }

    pub fn task(&self, index: u64) -> TaskInstance {
        let mut rng = self.rng_for(index);
        let cfg = self.family.config();
        let mut task = match &self.family {
            TaskFamily::Pattern(_) => sample_pattern_task(cfg, &mut rng),
            TaskFamily::FixedProgram { program_seed, .. } => fixed_program_family(cfg, *program_seed, &mut rng),
        };
        task.task_id = format!("gen:{}:{}:{}", self.family.name(), cfg.seed, index);
        task
    }

    pub fn tasks(&self, range: std::ops::Range<u64>) -> Vec<TaskInstance> {
        range.map(|i| self.task(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rayon::prelude::*;

    fn nonzero(g: &Grid) -> Vec<(usize, usize, u8)> {
        (0..g.rows())
            .flat_map(|r| (0..g.cols()).map(move |c| (r, c)))
            .filter_map(|(r, c)| (g.get(r, c) != 0).then(|| (r, c, g.get(r, c))))
            .collect()
    }

    fn marker(p: &Pair) -> (usize, usize) {
        let nz = nonzero(&p.input);
        assert_eq!(nz.len(), 1);
        (nz[0].0, nz[0].1)
    }

    fn extract(cfg: &PatternFamilyConfig, p: &Pair) -> Vec<u8> {
        let (r, c) = marker(p);
        let mut out = vec![];
        for i in 0..cfg.pattern_rows {
            for j in 0..cfg.pattern_cols {
                out.push(p.output.get(r + i, c + j));
            }
        }
        out
    }

    #[test]
    fn single_marker_pixel_per_input() {
        let cfg = PatternFamilyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = sample_pattern_task(&cfg, &mut rng);
            assert_eq!(t.pairs.len(), 4);
            for p in &t.pairs {
                let nz = nonzero(&p.input);
                assert_eq!(nz.len(), 1);
                assert_eq!(nz[0].2, 1);
                assert!(nz[0].0 + cfg.pattern_rows <= cfg.grid_rows);
                assert!(nz[0].1 + cfg.pattern_cols <= cfg.grid_cols);
            }
        }
    }

    #[test]
    fn zero_density_outputs_are_black() {
        let cfg = PatternFamilyConfig {
            color_density: 0.0,
            ..Default::default()
        };
        let t = sample_pattern_task(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(t.pairs.iter().all(|p| p.output.cells().iter().all(|&v| v == 0)));
    }

    #[test]
    fn pattern_is_shared_within_a_task() {
        let cfg = PatternFamilyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = sample_pattern_task(&cfg, &mut rng);
            let first = extract(&cfg, &t.pairs[0]);
            for p in &t.pairs[1..] {
                assert_eq!(extract(&cfg, p), first);
            }
            let q = Pair {
                input: t.queries[0].input.clone(),
                output: t.queries[0].output.clone().unwrap(),
            };
            assert_eq!(extract(&cfg, &q), first);
        }
    }

    #[test]
    fn tiny_outputs_are_confined_to_the_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = sample_tiny_pattern_task(&mut rng);
            for p in &t.pairs {
                assert_eq!(p.output.shape(), (4, 4));
                let (r, c) = marker(p);
                for (i, j, _) in nonzero(&p.output) {
                    assert!((r..r + 2).contains(&i) && (c..c + 2).contains(&j));
                }
            }
        }
    }

    #[test]
    fn seeds_replay_and_differ() {
        let s1 = TaskStream::new(TaskFamily::Pattern(PatternFamilyConfig {
            seed: 7,
            ..Default::default()
        }))
        .unwrap();
        let s2 = s1.clone();
        assert_eq!(s1.tasks(0..20), s2.tasks(0..20));
        let other = TaskStream::new(TaskFamily::Pattern(PatternFamilyConfig {
            seed: 8,
            ..Default::default()
        }))
        .unwrap();
        // Collision probability per pair of draws is (0.5/9 + 0.5)^16 ~ 1e-4.
        let cfg = PatternFamilyConfig::default();
        let same = (0..20)
            .filter(|&i| extract(&cfg, &s1.task(i).pairs[0]) == extract(&cfg, &other.task(i).pairs[0]))
            .count();
        assert_eq!(same, 0);
        assert_eq!(s1.task(3).task_id, "gen:pattern:7:3");
    }

    #[test]
    fn fixed_program_shares_pattern_across_tasks() {
        let cfg = PatternFamilyConfig::default();
        let stream = TaskStream::new(TaskFamily::FixedProgram {
            config: cfg.clone(),
            program_seed: 42,
        })
        .unwrap();
        let expected = fixed_program_pattern(&cfg, 42).cells;
        let mut markers = std::collections::HashSet::new();
        for i in 0..30 {
            let t = stream.task(i);
            assert_eq!(t.pairs.len(), 4);
            for p in &t.pairs {
                assert_eq!(extract(&cfg, p), expected);
                markers.insert(marker(p));
                // Cell-wise, the output is exactly the pattern at the marker.
                let (r, c) = marker(p);
                assert_eq!(*p, paste_pair(&cfg, &fixed_program_pattern(&cfg, 42), r, c));
            }
        }
        assert!(markers.len() > 10);
    }

    #[test]
    fn parallel_generation_matches_sequential() {
        let stream = TaskStream::new(TaskFamily::Pattern(PatternFamilyConfig {
            seed: 99,
            ..Default::default()
        }))
        .unwrap();
        let sequential = stream.tasks(0..64);
        let chunks: Vec<Vec<TaskInstance>> = (0..8u64)
            .into_par_iter()
            .map(|w| (0..8).map(|k| stream.task(w * 8 + k)).collect())
            .collect();
        assert_eq!(chunks.concat(), sequential);
    }

    #[test]
    fn config_validation() {
        let bad = [
            PatternFamilyConfig {
                color_density: 1.5,
                ..Default::default()
            },
            PatternFamilyConfig {
                pattern_rows: 11,
                ..Default::default()
            },
            PatternFamilyConfig {
                grid_cols: 31,
                ..Default::default()
            },
            PatternFamilyConfig {
                marker_color: 10,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert_eq!(PatternFamilyConfig::default().marker_positions(), 49);
    }
}
