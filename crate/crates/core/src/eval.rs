//! Scoring, task evaluation and experiment tables.
//!
//! Every attempt is one greedy decode; test-time budget is spent only in the
//! latent search. A task counts as solved at top-k when one of its first k
//! attempts matches every query exactly.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::decoder::generate;
use crate::error::{Error, Result};
use crate::grids::{Grid, Pair, TaskInstance, NUM_COLORS};
use crate::model::Model;
use crate::search::{init_latent, latent_optimize, InitMode, SearchConfig, SearchReport};
use crate::taskgen::{PatternFamilyConfig, TaskFamily, TaskStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub exact: bool,
    /// Matching cells on the shapes' overlap over the truth's cell count.
    pub pixel_acc: f64,
}

pub fn score_prediction(pred: &Grid, truth: &Grid) -> Score {
    let rows = pred.rows().min(truth.rows());
    let cols = pred.cols().min(truth.cols());
    let matching = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .filter(|&(i, j)| pred.get(i, j) == truth.get(i, j))
        .count();
    Score {
        exact: pred == truth,
        pixel_acc: matching as f64 / truth.cells().len() as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub search: SearchConfig,
    /// 1 or 2.
    pub attempts: usize,
    /// Seeds prior draws, encoder samples and random search, per task.
    pub seed: u64,
}

impl InferConfig {
    pub fn new(search: SearchConfig, attempts: usize, seed: u64) -> Result<Self> {
        if !(1..=2).contains(&attempts) {
            return Err(Error::Config(format!("attempts must be 1 or 2, got {attempts}")));
        }
        search.validate()?;
        Ok(Self { search, attempts, seed })
    }

    fn rng_for(&self, task_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(task_index);
        rng
    }
}

/// Outputs predicted for each query input, attempts in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub attempts: Vec<Vec<Grid>>,
    /// Latent decoded by each attempt.
    pub latents: Vec<Vec<f32>>,
    pub search: SearchReport,
}

/// Searches a latent on `pairs` and decodes every query input from it. The
/// second attempt decodes the best visited latent that differs from the
/// first, or the encoder mean when the search visited no other latent.
pub fn predict(model: &Model, pairs: &[Pair], inputs: &[Grid], cfg: &InferConfig, task_index: u64) -> Result<Prediction> {
    if pairs.is_empty() {
        return Err(Error::EmptySet("task has no specification pairs"));
    }
    let mut rng = cfg.rng_for(task_index);
    let start = init_latent(model, pairs, cfg.search.init, &mut rng)?;
    let report = latent_optimize(model, pairs, &start, &cfg.search, &mut rng)?;
    let first = report.selected().to_vec();
    let mut latents = vec![first.clone()];
    if cfg.attempts == 2 {
        let second = report
            .ranked_distinct(3)
            .into_iter()
            .map(|p| &p.latent)
            .find(|z| **z != first)
            .cloned();
        let second = match second {
            Some(z) => z,
            None => init_latent(model, pairs, InitMode::EncoderMean, &mut rng)?.latent,
        };
        latents.push(second);
    }
    let attempts = latents
        .iter()
        .map(|z| inputs.iter().map(|x| generate(model, x, z)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok(Prediction {
        attempts,
        latents,
        search: report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    /// `scores[attempt][query]`.
    pub scores: Vec<Vec<Score>>,
    pub solved_top1: bool,
    pub solved_top2: bool,
    pub init_loglik: f64,
    pub best_loglik: f64,
    pub search_steps: usize,
    pub nonfinite: bool,
}

/// Predicts the queries of `task` from its pairs and scores them. Query
/// outputs are only read after decoding.
pub fn evaluate_task(model: &Model, task: &TaskInstance, cfg: &InferConfig, task_index: u64) -> Result<TaskResult> {
    let truths: Vec<&Grid> = task
        .queries
        .iter()
        .map(|q| q.output.as_ref().ok_or_else(|| Error::MissingTruth(task.task_id.clone())))
        .collect::<Result<_>>()?;
    if truths.is_empty() {
        return Err(Error::MissingTruth(task.task_id.clone()));
    }
    let inputs: Vec<Grid> = task.queries.iter().map(|q| q.input.clone()).collect();
    let pred = predict(model, &task.pairs, &inputs, cfg, task_index)?;
    let scores: Vec<Vec<Score>> = pred
        .attempts
        .iter()
        .map(|outs| outs.iter().zip(&truths).map(|(p, t)| score_prediction(p, t)).collect())
        .collect();
    let solved = |k: usize| scores.iter().take(k).any(|a| a.iter().all(|s| s.exact));
    Ok(TaskResult {
        task_id: task.task_id.clone(),
        solved_top1: solved(1),
        solved_top2: solved(2),
        scores,
        init_loglik: pred.search.init.loglik,
        best_loglik: pred.search.best.loglik,
        search_steps: pred.search.steps_taken,
        nonfinite: pred.search.nonfinite,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub tasks: usize,
    /// Fraction of tasks solved, in percent.
    pub top1: f64,
    pub top2: f64,
    /// Fraction of individual queries whose first attempt is exact, in percent.
    pub query_top1: f64,
    /// Mean first-attempt pixel accuracy over queries, in percent.
    pub pixel_acc: f64,
}

pub fn summarize(results: &[TaskResult]) -> EvalSummary {
    let n = results.len().max(1) as f64;
    let first: Vec<&Score> = results.iter().flat_map(|r| &r.scores[0]).collect();
    let q = first.len().max(1) as f64;
    EvalSummary {
        tasks: results.len(),
        top1: 100.0 * results.iter().filter(|r| r.solved_top1).count() as f64 / n,
        top2: 100.0 * results.iter().filter(|r| r.solved_top2).count() as f64 / n,
        query_top1: 100.0 * first.iter().filter(|s| s.exact).count() as f64 / q,
        pixel_acc: 100.0 * first.iter().map(|s| s.pixel_acc).sum::<f64>() / q,
    }
}

/// Evaluates every task in parallel. Task `i` uses random stream `i` of
/// `cfg.seed`, so results do not depend on the number of workers.
pub fn evaluate_tasks(model: &Model, tasks: &[TaskInstance], cfg: &InferConfig) -> Result<(Vec<TaskResult>, EvalSummary)> {
    let results: Vec<TaskResult> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| evaluate_task(model, t, cfg, i as u64))
        .collect::<Result<_>>()?;
    let summary = summarize(&results);
    Ok((results, summary))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One training method and the models it produced, one per seed.
pub struct TrainedRuns<'a> {
    pub label: String,
    pub models: Vec<(u64, &'a Model)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub training: String,
    pub inference: String,
    /// `(seed, top-1 exact-match percent)`.
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    /// Sample standard deviation over seeds.
    pub std: f64,
    /// Mean first-attempt pixel accuracy.
    pub pixel_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config: serde_json::Value,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    /// One line per training method, one `mean (std)` column per inference
    /// method, preceded by a header.
    pub fn to_csv(&self) -> String {
        let mut inference: Vec<&str> = Vec::new();
        let mut training: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !inference.contains(&c.inference.as_str()) {
                inference.push(&c.inference);
            }
            if !training.contains(&c.training.as_str()) {
                training.push(&c.training);
            }
        }
        let mut out = String::from("training");
        for i in &inference {
            let _ = write!(out, ",{i}");
        }
        out.push('\n');
        for t in &training {
            out.push_str(t);
            for i in &inference {
                match self.cells.iter().find(|c| c.training == *t && c.inference == *i) {
                    Some(c) => {
                        let _ = write!(out, ",{:.1} ({:.1})", c.mean, c.std);
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Exact-match accuracy of every training method under every inference
/// method, with mean and spread over seeds.
pub fn run_ablation_grid(
    runs: &[TrainedRuns<'_>],
    infer: &[(String, InferConfig)],
    tasks: &[TaskInstance],
    config: serde_json::Value,
) -> Result<AblationTable> {
    let mut cells = Vec::new();
    for run in runs {
        for (label, cfg) in infer {
            let mut per_seed = Vec::new();
            let mut pixel = Vec::new();
            for (seed, model) in &run.models {
                let (_, s) = evaluate_tasks(model, tasks, cfg)?;
                per_seed.push((*seed, s.top1));
                pixel.push(s.pixel_acc);
            }
            let (mean, std) = mean_std(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>());
            cells.push(AblationCell {
                training: run.label.clone(),
                inference: label.clone(),
                per_seed,
                mean,
                std,
                pixel_acc: mean_std(&pixel).0,
            });
        }
    }
    Ok(AblationTable { config, cells })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub density: f64,
    /// `(inference label, summary)` in the order given.
    pub results: Vec<(String, EvalSummary)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodTable {
    pub config: serde_json::Value,
    pub rows: Vec<OodRow>,
}

impl OodTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("density");
        if let Some(r) = self.rows.first() {
            for (label, _) in &r.results {
                let _ = write!(out, ",{label}");
            }
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}", r.density);
            for (_, s) in &r.results {
                let _ = write!(out, ",{:.1}", s.top1);
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates `model` on pattern tasks drawn at each color density. Tasks for
/// every density share `base.seed`, so only the density differs.
pub fn run_ood_protocol(
    model: &Model,
    base: &PatternFamilyConfig,
    densities: &[f64],
    infer: &[(String, InferConfig)],
    tasks: usize,
) -> Result<OodTable> {
    let mut rows = Vec::new();
    for &density in densities {
        if !(0.0..=1.0).contains(&density) {
            return Err(Error::Config(format!("density {density} outside [0, 1]")));
        }
        let family = TaskFamily::Pattern(PatternFamilyConfig {
            color_density: density,
            ..base.clone()
        });
        let stream = TaskStream::new(family).map_err(|e| Error::Config(e.0))?;
        let set = stream.tasks(0..tasks as u64);
        let mut results = Vec::new();
        for (label, cfg) in infer {
            results.push((label.clone(), evaluate_tasks(model, &set, cfg)?.1));
        }
        rows.push(OodRow { density, results });
    }
    Ok(OodTable {
        config: serde_json::json!({
            "base": base,
            "densities": densities,
            "tasks": tasks,
            "inference": infer,
        }),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalTile {
    /// Lattice coordinates in the unit square.
    pub u: [f64; 2],
    pub latent: [f32; 2],
    pub output: Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Traversal {
    pub resolution: usize,
    pub input: Grid,
    /// Row-major, `resolution * resolution` tiles; row index follows `u[0]`.
    pub tiles: Vec<TraversalTile>,
}

/// Decodes `input` at the latent `(Phi^-1(a), Phi^-1(b))` for the centre
/// `(a, b)` of every cell of an `R x R` lattice on the unit square.
pub fn latent_traversal(model: &Model, resolution: usize, input: &Grid) -> Result<Traversal> {
    if model.arch.latent_dim != 2 {
        return Err(Error::WrongLatentDim {
            expected: 2,
            got: model.arch.latent_dim,
        });
    }
    if resolution == 0 {
        return Err(Error::Config("traversal resolution must be positive".into()));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let at = |i: usize| (i as f64 + 0.5) / resolution as f64;
    let cells: Vec<(usize, usize)> = (0..resolution).flat_map(|i| (0..resolution).map(move |j| (i, j))).collect();
    let tiles = cells
        .par_iter()
        .map(|&(i, j)| {
            let u = [at(i), at(j)];
            let latent = [normal.inverse_cdf(u[0]) as f32, normal.inverse_cdf(u[1]) as f32];
            let output = generate(model, input, &latent)?;
            Ok(TraversalTile { u, latent, output })
        })
        .collect::<Result<_>>()?;
    Ok(Traversal {
        resolution,
        input: input.clone(),
        tiles,
    })
}

/// The usual ARC palette, black first.
pub const PALETTE: [[u8; 3]; NUM_COLORS] = [
    [0, 0, 0],
    [0, 116, 217],
    [255, 65, 54],
    [46, 204, 64],
    [255, 220, 0],
    [170, 170, 170],
    [240, 18, 190],
    [255, 133, 27],
    [127, 219, 255],
    [135, 12, 37],
];

impl Traversal {
    /// Binary PPM of all tiles; each cell is `scale` pixels wide and tiles are
    /// separated by a one-pixel white border.
    pub fn to_ppm(&self, scale: usize) -> Vec<u8> {
        let scale = scale.max(1);
        let tile_h = self.tiles.iter().map(|t| t.output.rows()).max().unwrap_or(1) * scale;
        let tile_w = self.tiles.iter().map(|t| t.output.cols()).max().unwrap_or(1) * scale;
        let r = self.resolution;
        let (h, w) = (r * (tile_h + 1) + 1, r * (tile_w + 1) + 1);
        let mut px = vec![255u8; h * w * 3];
        for (k, tile) in self.tiles.iter().enumerate() {
            let (ti, tj) = (k / r, k % r);
            let (y0, x0) = (1 + ti * (tile_h + 1), 1 + tj * (tile_w + 1));
            for y in 0..tile_h {
                for x in 0..tile_w {
                    let (ci, cj) = (y / scale, x / scale);
                    let rgb = if ci < tile.output.rows() && cj < tile.output.cols() {
                        PALETTE[tile.output.get(ci, cj) as usize]
                    } else {
                        [255, 255, 255]
                    };
                    let at = ((y0 + y) * w + x0 + x) * 3;
                    px[at..at + 3].copy_from_slice(&rgb);
                }
            }
        }
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        out.extend_from_slice(&px);
        out
    }
}
