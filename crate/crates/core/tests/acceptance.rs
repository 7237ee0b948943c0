//! Acceptance suite. Prints one PASS/FAIL/SKIP/INFO line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The property criteria (1-8), the parameter counts and two scaled-down
//! checks run on every `cargo test`. The training experiments (9-15) and the
//! ARC-sized 100-step run take CPU-days or most of the machine's memory; they
//! run only when `LPN_DESK=1` (and `LPN_ARC_SMOKE=1` for the ARC run).
//!
//! Desk settings: `LPN_DESK_DIR` caches trained checkpoints (default
//! `target/desk`), `LPN_DESK_SEEDS` is a comma-separated seed list (default
//! `0`), `LPN_DESK_EVAL_TASKS` sets the held-out task count (default 256).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use lpn::decoder::{generate, output_logits};
use lpn::diagnostics::decoder_gradcheck;
use lpn::encoder::{encode_pairs, LatentPosterior};
use lpn::eval::{evaluate_tasks, EvalSummary, InferConfig};
use lpn::grids::{decode_sequence, encode_sequence, encode_sequence_with, load_arc_json, Grid, Pair, SequenceLayout, TaskInstance, MAX_SIDE};
use lpn::model::{ArchConfig, Model, Preset};
use lpn::nn::gradcheck::GradcheckConfig;
use lpn::nn::layers::StackConfig;
use lpn::persistence::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, CheckpointMeta};
use lpn::search::{init_from_posteriors, init_latent, latent_optimize, InitMode, SearchConfig};
use lpn::taskgen::{PatternFamilyConfig, TaskFamily, TaskStream};
use lpn::training::{kl_gaussian, leave_one_out_latents, task_noise, InnerMode, TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_grid<R: Rng>(r: &mut R, max_rows: usize, max_cols: usize) -> Grid {
    let (rows, cols) = (r.gen_range(1..=max_rows), r.gen_range(1..=max_cols));
    Grid::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(0..10)).collect()).unwrap()
}

fn stack(layers: usize, heads: usize, head_dim: usize) -> StackConfig {
    StackConfig {
        layers,
        heads,
        head_dim,
        mlp_factor: 2.0,
    }
}

fn small_arch(layers: usize, heads: usize, head_dim: usize, latent_dim: usize, side: usize) -> ArchConfig {
    ArchConfig {
        encoder: stack(layers, heads, head_dim),
        decoder: stack(layers, heads, head_dim),
        latent_dim,
        max_rows: side,
        max_cols: side,
    }
}

/// Fresh init scaled up so that the small models are far from uniform.
fn lively_model(arch: ArchConfig, seed: u64) -> Model {
    let mut m = Model::init(arch, seed).unwrap();
    for (name, t) in m.params.iter_mut() {
        if !name.contains(".ln") {
            for v in t.data_mut() {
                *v *= 10.0;
            }
        }
    }
    m
}

// 1 -------------------------------------------------------------------------

fn c1_codec() -> Outcome {
    let mut r = rng(1);
    let n = 10_000;
    for k in 0..n {
        let g = random_grid(&mut r, MAX_SIDE, MAX_SIDE);
        let seq = encode_sequence(&g);
        check(decode_sequence(&seq).as_ref() == Ok(&g), || format!("grid {k} does not round-trip"))?;
        check(seq.pad_mask.iter().filter(|&&m| m).count() == g.rows() * g.cols(), || format!("grid {k}: pad mask miscounts"))?;
        // Scrambling every padded slot leaves the decoded grid unchanged.
        let mut scrambled = seq.clone();
        for (tok, real) in scrambled.pixel_tokens.iter_mut().zip(&seq.pad_mask) {
            if !real {
                *tok = r.gen_range(0..10);
            }
        }
        check(decode_sequence(&scrambled).as_ref() == Ok(&g), || format!("grid {k}: padding leaks into decoding"))?;
        // Any canvas that fits gives the same grid back.
        let layout = SequenceLayout::new(r.gen_range(g.rows()..=MAX_SIDE), r.gen_range(g.cols()..=MAX_SIDE)).unwrap();
        let other = encode_sequence_with(&g, layout).unwrap();
        check(decode_sequence(&other).as_ref() == Ok(&g), || format!("grid {k}: layout changes the grid"))?;
    }
    Ok(format!("{n} random grids, 0 failures"))
}

// 2 -------------------------------------------------------------------------

fn c2_gradcheck() -> Outcome {
    let cfg = GradcheckConfig {
        h: 1e-3,
        rel_tol: 1e-2,
        abs_tol: 1e-3,
        samples: 64,
        seed: 0,
    };
    // Widths 12-32; the narrowest preset decoder is 32 wide.
    let archs = [
        small_arch(1, 2, 6, 3, 4),
        small_arch(2, 2, 8, 5, 3),
        small_arch(1, 3, 8, 8, 5),
        small_arch(2, 4, 8, 2, 4),
    ];
    let (mut worst_rel, mut worst_abs, mut checked) = (0.0f32, 0.0f32, 0);
    for (i, arch) in archs.into_iter().enumerate() {
        let model = Model::init(arch, 100 + i as u64).unwrap();
        let report = decoder_gradcheck(&model, 2, 3, &GradcheckConfig { seed: i as u64, ..cfg }).map_err(|e| e.to_string())?;
        check(report.passed, || format!("model {i}: {report:?}"))?;
        for r in std::iter::once(&report.latent).chain(report.params.iter().map(|p| &p.1)) {
            worst_rel = worst_rel.max(if r.max_abs_err > cfg.abs_tol { r.max_rel_err } else { 0.0 });
            worst_abs = worst_abs.max(r.max_abs_err);
            checked += r.checked;
        }
    }
    Ok(format!(
        "4 random models, {checked} coordinates; worst abs err {worst_abs:.2e}, worst rel err beyond abs tol {worst_rel:.2e}"
    ))
}

/// Below preset widths f32 rounding in the forward pass approaches the
/// tolerance at h = 1e-3; report the worst error over a sweep of h.
fn gradcheck_noise_floor() -> Outcome {
    let model = Model::init(small_arch(1, 3, 2, 8, 5), 102).unwrap();
    let mut parts = Vec::new();
    for h in [1e-3f32, 3e-3, 1e-2] {
        let cfg = GradcheckConfig {
            h,
            rel_tol: 1e-2,
            abs_tol: 1e-3,
            samples: 64,
            seed: 2,
        };
        let r = decoder_gradcheck(&model, 2, 3, &cfg).map_err(|e| e.to_string())?;
        let worst = r.params.iter().map(|p| p.1.max_abs_err).fold(r.latent.max_abs_err, f32::max);
        parts.push(format!("h={h:.0e}: worst abs {worst:.2e}, {}", if r.passed { "pass" } else { "fail" }));
    }
    Ok(format!("width-6 decoder, {}", parts.join("; ")))
}

// 3 -------------------------------------------------------------------------

fn c3_kl() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let d = r.gen_range(1..=16);
        let post = LatentPosterior {
            mean: (0..d).map(|_| r.gen_range(-2.0..2.0)).collect(),
            log_var: (0..d).map(|_| r.gen_range(-3.0..2.0)).collect(),
        };
        // KL(N(m, s^2) || N(0, 1)) = log(1/s) + (s^2 + m^2) / 2 - 1/2 per coordinate.
        let exact: f64 = post
            .mean
            .iter()
            .zip(&post.log_var)
            .map(|(&m, &lv)| {
                let s = (0.5 * lv as f64).exp();
                -s.ln() + (s * s + (m as f64).powi(2)) / 2.0 - 0.5
            })
            .sum();
        worst = worst.max((kl_gaussian(&post) - exact).abs());
    }
    check(worst <= 1e-6, || format!("closed form off by {worst:e}"))?;

    let post = LatentPosterior {
        mean: vec![0.7, -1.2, 0.1],
        log_var: vec![-0.5, 0.8, -2.0],
    };
    let n = 100_000;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut log_ratio = 0.0f64;
        for (&m, &lv) in post.mean.iter().zip(&post.log_var) {
            let s = (0.5 * lv as f64).exp();
            let e: f64 = r.sample(StandardNormal);
            let z = m as f64 + s * e;
            // log q(z) - log p(z); the 2*pi terms cancel.
            log_ratio += -s.ln() - 0.5 * e * e + 0.5 * z * z;
        }
        samples.push(log_ratio);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let kl = kl_gaussian(&post);
    check((mean - kl).abs() <= 3.0 * se, || format!("Monte Carlo {mean:.5} vs {kl:.5}, SE {se:.5}"))?;
    Ok(format!("closed form max err {worst:.1e}; MC {mean:.4} vs {kl:.4} ({:.2} SE)", (mean - kl).abs() / se))
}

// 4 -------------------------------------------------------------------------

fn c4_permutation() -> Outcome {
    let mut r = rng(4);
    let trials = 40;
    for trial in 0..trials {
        let model = lively_model(small_arch(1, 2, 4, 6, 5), trial);
        let n = r.gen_range(2..=6);
        let pairs: Vec<Pair> = (0..n)
            .map(|_| Pair {
                input: random_grid(&mut r, 5, 5),
                output: random_grid(&mut r, 5, 5),
            })
            .collect();
        let noise: Vec<Vec<f32>> = (0..n).map(|_| (0..6).map(|_| r.sample(StandardNormal)).collect()).collect();
        let query = random_grid(&mut r, 5, 5);

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let shuffled: Vec<Pair> = order.iter().map(|&i| pairs[i].clone()).collect();
        let shuffled_noise: Vec<Vec<f32>> = order.iter().map(|&i| noise[i].clone()).collect();

        for mode in [InitMode::EncoderMean, InitMode::EncoderSample] {
            let a = init_from_posteriors(&encode_pairs(&model, &pairs).unwrap(), mode, &noise).unwrap();
            let b = init_from_posteriors(&encode_pairs(&model, &shuffled).unwrap(), mode, &shuffled_noise).unwrap();
            let bits = |z: &[f32]| z.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            check(bits(&a.latent) == bits(&b.latent), || format!("trial {trial} {mode:?}: latent changed"))?;
            let (ga, gb) = (generate(&model, &query, &a.latent).unwrap(), generate(&model, &query, &b.latent).unwrap());
            check(ga == gb, || format!("trial {trial} {mode:?}: prediction changed"))?;
        }
    }
    Ok(format!("{trials} shuffled specifications, mean and sampled aggregation, latents bitwise equal"))
}

// 5 -------------------------------------------------------------------------

fn c5_search() -> Outcome {
    let mut r = rng(5);
    let mut reports = 0;
    for trial in 0..12u64 {
        let model = lively_model(small_arch(1, 2, 4, 4, 4), 50 + trial);
        let pairs: Vec<Pair> = (0..3)
            .map(|_| Pair {
                input: random_grid(&mut r, 4, 4),
                output: random_grid(&mut r, 4, 4),
            })
            .collect();
        let query = random_grid(&mut r, 4, 4);
        let mean_cfg = InferConfig::new(SearchConfig::mean(), 1, trial).unwrap();
        let ga0_cfg = InferConfig::new(SearchConfig::gradient_ascent(0, 0.1), 1, trial).unwrap();
        let a = lpn::eval::predict(&model, &pairs, std::slice::from_ref(&query), &mean_cfg, 0).unwrap();
        let b = lpn::eval::predict(&model, &pairs, std::slice::from_ref(&query), &ga0_cfg, 0).unwrap();
        let bits = |z: &[f32]| z.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        check(bits(&a.latents[0]) == bits(&b.latents[0]) && a.attempts == b.attempts, || format!("trial {trial}: GA-0 differs from mean"))?;

        let searches = [
            SearchConfig::gradient_ascent(15, 0.5),
            SearchConfig::gradient_ascent(15, 5.0),
            SearchConfig::adam_cosine(15),
            SearchConfig::random_search(15),
            SearchConfig::random_search(15).with_infer("rs:15").unwrap(),
        ];
        for (k, s) in searches.iter().enumerate() {
            let mut sr = rng(trial * 100 + k as u64);
            let start = init_latent(&model, &pairs, InitMode::EncoderMean, &mut sr).unwrap();
            let rep = latent_optimize(&model, &pairs, &start, s, &mut sr).unwrap();
            check(rep.best.loglik >= rep.init.loglik, || format!("trial {trial} {}: best below init", s.label()))?;
            let bsf = rep.best_so_far();
            check(bsf.windows(2).all(|w| w[1] >= w[0]), || format!("trial {trial} {}: best-so-far decreases", s.label()))?;
            reports += 1;
        }
    }
    Ok(format!("12 GA-0/mean comparisons bitwise equal; {reports} search reports monotone"))
}

// 6 -------------------------------------------------------------------------

fn c6_leave_one_out() -> Outcome {
    let mut cfg = TrainConfig::from_preset(Preset::Tiny);
    cfg.arch = small_arch(1, 2, 4, 5, 4);
    cfg.pairs = 4;
    cfg.family.config_mut().pairs_per_task = 4;
    let model = lively_model(cfg.arch, 6);
    let tasks = TaskStream::new(cfg.family.clone()).unwrap().tasks(0..6);
    let noise: Vec<_> = (0..tasks.len() as u64).map(|t| task_noise(cfg.seed, t, cfg.pairs, cfg.arch.latent_dim)).collect();
    let base = leave_one_out_latents(&model, &cfg, &tasks, &noise).unwrap();
    let mut r = rng(6);
    let mut cases = 0;
    for t in 0..tasks.len() {
        for i in 0..cfg.pairs {
            let mut mutated = tasks.clone();
            mutated[t].pairs[i].output = random_grid(&mut r, 4, 4);
            let z = leave_one_out_latents(&model, &cfg, &mutated, &noise).unwrap();
            let row = t * cfg.pairs + i;
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            check(bits(&z[row]) == bits(&base[row]), || format!("task {t} pair {i}: own output leaks into its latent"))?;
            let others_moved = (0..cfg.pairs).filter(|&j| j != i).any(|j| z[t * cfg.pairs + j] != base[t * cfg.pairs + j]);
            check(others_moved, || format!("task {t} pair {i}: mutation had no effect on the other pairs"))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} single-pair mutations; own latent bitwise unchanged, others moved"))
}

// 7 -------------------------------------------------------------------------

fn c7_causal() -> Outcome {
    let model = lively_model(small_arch(2, 2, 4, 3, 5), 7);
    let mut r = rng(7);
    let input = random_grid(&mut r, 5, 5);
    let target = Grid::new(5, 5, (0..25).map(|_| r.gen_range(0..10)).collect()).unwrap();
    let z: Vec<f32> = (0..3).map(|_| r.sample(StandardNormal)).collect();
    let base = output_logits(&model, &input, &target, &z).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut perturbations = 0;
    for t in 0..25 {
        for delta in 1..10u8 {
            let mut cells = target.cells().to_vec();
            cells[t] = (cells[t] + delta) % 10;
            let changed = Grid::new(5, 5, cells).unwrap();
            let out = output_logits(&model, &input, &changed, &z).unwrap();
            check(bits(&out.rows) == bits(&base.rows) && bits(&out.cols) == bits(&base.cols), || format!("position {t}: shape logits moved"))?;
            check(bits(&out.grid[..(t + 1) * 10]) == bits(&base.grid[..(t + 1) * 10]), || format!("position {t}: logits at or before it moved"))?;
            if t < 24 {
                check(out.grid[(t + 1) * 10..] != base.grid[(t + 1) * 10..], || format!("position {t}: later logits ignore it"))?;
            }
            perturbations += 1;
        }
    }
    Ok(format!("{perturbations} perturbations over a 5x5 target; earlier logits bitwise unchanged"))
}

// 8 -------------------------------------------------------------------------

fn c8_checkpoint() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig::from_preset(Preset::Tiny);
    cfg.arch = small_arch(1, 2, 4, 3, 4);
    cfg.batch_size = 2;
    cfg.steps = 2;
    let mut trainer = Trainer::init(cfg.clone()).map_err(|e| e.to_string())?;
    trainer.run(|_, _| Ok(())).map_err(|e| e.to_string())?;
    let meta = CheckpointMeta {
        step: trainer.step(),
        seed: cfg.seed,
        preset: Some("tiny".into()),
        config: serde_json::to_value(&cfg).unwrap(),
    };
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&a, &trainer.model, Some(&trainer.opt), &meta).map_err(|e| e.to_string())?;
    let ck = load_checkpoint(&a, Some(&cfg.arch)).map_err(|e| e.to_string())?;
    save_checkpoint(&b, &ck.model, ck.opt.as_ref(), &ck.meta).map_err(|e| e.to_string())?;
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    check(ba == bb, || "second save differs from the first".into())?;
    for (name, t) in trainer.model.params.iter() {
        let u = ck.model.params.get(name);
        let same = t.shape() == u.shape() && t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        check(same, || format!("tensor {name} not bitwise equal"))?;
    }
    check(ck.opt.as_ref() == Some(&trainer.opt), || "optimizer state changed".into())?;

    let golden_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden-v1.ckpt");
    let golden = std::fs::read(&golden_path).map_err(|e| format!("{}: {e}", golden_path.display()))?;
    let parsed = from_bytes(&golden, None).map_err(|e| e.to_string())?;
    check(to_bytes(&parsed.model, parsed.opt.as_ref(), &parsed.meta) == golden, || "golden file does not re-serialize identically".into())?;
    Ok(format!("{} byte checkpoint round-trips bitwise; golden file re-serializes identically", ba.len()))
}

// Parameter counts -------------------------------------------------------------

fn param_counts() -> Outcome {
    let mut notes = Vec::new();
    for p in [Preset::Overfit, Preset::Pattern, Preset::Arc] {
        let m = Model::init(p.arch(), 0).unwrap();
        let ratio = m.reported_size() as f64 / p.reported_size();
        check((ratio - 1.0).abs() <= 0.02, || {
            format!("{}: {} vs {} ({ratio:.4})", p.name(), m.reported_size(), p.reported_size())
        })?;
        notes.push(format!("{} {:.3}", p.name(), ratio));
    }
    Ok(notes.join(", "))
}

/// Presets whose size is published only as "1M".
fn param_counts_rounded() -> Outcome {
    let notes: Vec<String> = [Preset::Tiny, Preset::Ood]
        .into_iter()
        .map(|p| {
            let m = Model::init(p.arch(), 0).unwrap();
            format!("{} {} bytes, ratio {:.3} to \"1M\"", p.name(), m.reported_size(), m.reported_size() as f64 / p.reported_size())
        })
        .collect();
    Ok(notes.join("; "))
}

// Scaled-down checks ------------------------------------------------------------

/// The decoder-validation protocol of criterion 9 on 4x4 grids, 200 steps.
fn scaled_decoder_validation() -> Outcome {
    let mut cfg = TrainConfig::from_preset(Preset::Tiny);
    cfg.family = TaskFamily::FixedProgram {
        config: PatternFamilyConfig {
            pairs_per_task: cfg.pairs,
            ..PatternFamilyConfig::tiny()
        },
        program_seed: 0,
    };
    cfg.steps = 200;
    cfg.batch_size = 16;
    let mut trainer = Trainer::init(cfg.clone()).map_err(|e| e.to_string())?;
    trainer.run(|_, _| Ok(())).map_err(|e| e.to_string())?;
    let tasks = TaskStream::new(cfg.heldout_family()).unwrap().tasks(0..64);
    let infer = InferConfig::new(SearchConfig::mean(), 1, 0).unwrap();
    let (_, s) = evaluate_tasks(&trainer.model, &tasks, &infer).map_err(|e| e.to_string())?;
    check(s.pixel_acc >= 96.0, || format!("pixel accuracy {:.2}% after 200 steps", s.pixel_acc))?;
    Ok(format!("tiny fixed program, 200 steps x 16: held-out pixel accuracy {:.2}%", s.pixel_acc))
}

/// The evaluation protocol (GA sweep, top-2) on ARC-schema tasks with 30x30
/// canvases and mixed shapes, using a shallow model.
fn arc_protocol() -> Outcome {
    let mut r = rng(11);
    let mut doc = serde_json::Map::new();
    for t in 0..3 {
        let g = |r: &mut ChaCha8Rng| random_grid(r, 30, 30).to_rows();
        let train: Vec<_> = (0..r.gen_range(1..=3)).map(|_| serde_json::json!({"input": g(&mut r), "output": g(&mut r)})).collect();
        let test: Vec<_> = (0..r.gen_range(1..=2)).map(|_| serde_json::json!({"input": g(&mut r), "output": g(&mut r)})).collect();
        doc.insert(format!("{t:08x}"), serde_json::json!({"train": train, "test": test}));
    }
    let tasks: Vec<TaskInstance> = load_arc_json(serde_json::to_string(&doc).unwrap().as_bytes())
        .map_err(|e| e.to_string())?
        .into_values()
        .collect();
    let model = Model::init(small_arch(1, 1, 8, 4, 30), 0).unwrap();
    let mut lines = Vec::new();
    for k in [0, 2] {
        let infer = InferConfig::new(SearchConfig::adam_cosine(k), 2, 0).unwrap();
        let (results, s): (_, EvalSummary) = evaluate_tasks(&model, &tasks, &infer).map_err(|e| e.to_string())?;
        check(results.iter().all(|r| r.scores.len() == 2), || "missing second attempt".into())?;
        check(results.iter().all(|r| r.best_loglik >= r.init_loglik), || "search lost ground".into())?;
        lines.push(format!("ga:{k} top-2 {:.1}%", s.top2));
    }
    Ok(format!("3 ARC-schema tasks up to 30x30: {}", lines.join(", ")))
}

// Desk-scale experiments --------------------------------------------------------

struct Desk {
    dir: PathBuf,
    seeds: Vec<u64>,
    eval_tasks: usize,
}

impl Desk {
    fn from_env() -> Desk {
        let dir = std::env::var_os("LPN_DESK_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/desk"));
        let seeds = std::env::var("LPN_DESK_SEEDS")
            .ok()
            .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
            .unwrap_or_else(|| vec![0]);
        let eval_tasks = std::env::var("LPN_DESK_EVAL_TASKS").ok().and_then(|s| s.parse().ok()).unwrap_or(256);
        Desk { dir, seeds, eval_tasks }
    }

    /// Trains (or reloads) one model per seed.
    fn models(&self, name: &str, cfg: &TrainConfig) -> Result<Vec<Model>, String> {
        std::fs::create_dir_all(&self.dir).map_err(|e| e.to_string())?;
        self.seeds
            .iter()
            .map(|&seed| {
                let mut cfg = cfg.clone();
                cfg.seed = seed;
                let path = self.dir.join(format!("{name}-seed{seed}.ckpt"));
                if let Ok(ck) = load_checkpoint(&path, Some(&cfg.arch)) {
                    if ck.meta.step == cfg.steps {
                        return Ok(ck.model);
                    }
                }
                let started = Instant::now();
                let mut trainer = Trainer::init(cfg.clone()).map_err(|e| e.to_string())?;
                trainer
                    .run(|t, r| {
                        if r.step % 500 == 0 {
                            eprintln!("[{name} seed {seed}] step {} loss {:.4} ({:.0}s)", r.step, r.loss.total, started.elapsed().as_secs_f64());
                            let meta = CheckpointMeta {
                                step: t.step(),
                                seed,
                                preset: cfg.preset.map(|p| p.name().into()),
                                config: serde_json::to_value(&t.cfg).unwrap(),
                            };
                            save_checkpoint(&path, &t.model, None, &meta)?;
                        }
                        Ok(())
                    })
                    .map_err(|e| e.to_string())?;
                let meta = CheckpointMeta {
                    step: trainer.step(),
                    seed,
                    preset: cfg.preset.map(|p| p.name().into()),
                    config: serde_json::to_value(&trainer.cfg).unwrap(),
                };
                save_checkpoint(&path, &trainer.model, None, &meta).map_err(|e| e.to_string())?;
                Ok(trainer.model)
            })
            .collect()
    }

    /// Mean top-1 exact match over seeds.
    fn accuracy(&self, models: &[Model], family: &TaskFamily, search: SearchConfig) -> Result<f64, String> {
        let tasks = TaskStream::new(family.clone()).unwrap().tasks(0..self.eval_tasks as u64);
        let mut total = 0.0;
        for m in models {
            let infer = InferConfig::new(search, 1, 0).map_err(|e| e.to_string())?;
            total += evaluate_tasks(m, &tasks, &infer).map_err(|e| e.to_string())?.1.top1;
        }
        Ok(total / models.len() as f64)
    }
}

fn ga(k: usize) -> SearchConfig {
    SearchConfig::gradient_ascent(k, 0.1)
}

fn pattern_cfg(inner_steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::from_preset(Preset::Pattern);
    cfg.inner_steps = inner_steps;
    cfg.inner_mode = InnerMode::StopGradient;
    cfg
}

fn budget_sweep(desk: &Desk, models: &[Model], family: &TaskFamily) -> Result<Vec<f64>, String> {
    [SearchConfig::mean(), ga(5), ga(20), ga(100)].into_iter().map(|s| desk.accuracy(models, family, s)).collect()
}

fn c9(desk: &Desk) -> Outcome {
    let mut cfg = TrainConfig::from_preset(Preset::Overfit);
    cfg.steps = 10_000;
    cfg.batch_size = 128;
    let models = desk.models("overfit", &cfg)?;
    let tasks = TaskStream::new(cfg.heldout_family()).unwrap().tasks(0..desk.eval_tasks as u64);
    let infer = InferConfig::new(SearchConfig::mean(), 1, 0).unwrap();
    let mut worst = f64::MAX;
    for m in &models {
        worst = worst.min(evaluate_tasks(m, &tasks, &infer).map_err(|e| e.to_string())?.1.pixel_acc);
    }
    check(worst >= 96.0, || format!("pixel accuracy {worst:.2}% < 96%"))?;
    Ok(format!("held-out pixel accuracy {worst:.2}% (>= 96%)"))
}

fn c10(desk: &Desk) -> Outcome {
    let cfg = pattern_cfg(0);
    let models = desk.models("pattern-mean", &cfg)?;
    let family = cfg.heldout_family();
    let mean = desk.accuracy(&models, &family, SearchConfig::mean())?;
    let ga100 = desk.accuracy(&models, &family, ga(100))?;
    check(mean <= 15.0, || format!("mean inference {mean:.1}% > 15%"))?;
    check((40.0..=90.0).contains(&ga100), || format!("GA-100 {ga100:.1}% outside [40, 90]"))?;
    Ok(format!("mean {mean:.1}%, GA-100 {ga100:.1}%"))
}

fn c11(desk: &Desk) -> Outcome {
    let family = pattern_cfg(0).heldout_family();
    let g1 = desk.models("pattern-ga1", &pattern_cfg(1))?;
    let m0 = desk.models("pattern-mean", &pattern_cfg(0))?;
    let a = budget_sweep(desk, &g1, &family)?;
    let b = budget_sweep(desk, &m0, &family)?;
    check(a[3] >= 95.0, || format!("GA-1 trained, GA-100 inference {:.1}% < 95%", a[3]))?;
    for (k, label) in [(1, "GA-5"), (2, "GA-20"), (3, "GA-100")] {
        check(a[k] > b[k], || format!("{label}: GA-1 trained {:.1}% does not beat mean trained {:.1}%", a[k], b[k]))?;
    }
    Ok(format!("GA-1 trained {a:.1?} vs mean trained {b:.1?} (mean, GA-5, GA-20, GA-100)"))
}

fn c12(desk: &Desk) -> Outcome {
    let family = pattern_cfg(0).heldout_family();
    let mut notes = Vec::new();
    for (name, k) in [("pattern-mean", 0), ("pattern-ga1", 1)] {
        let acc = budget_sweep(desk, &desk.models(name, &pattern_cfg(k))?, &family)?;
        let drops: Vec<f64> = acc.windows(2).map(|w| w[0] - w[1]).filter(|d| *d > 0.0).collect();
        check(drops.is_empty() || (drops.len() == 1 && drops[0] <= 2.0), || format!("{name}: {acc:.1?} not monotone"))?;
        notes.push(format!("{name} {acc:.1?}"));
    }
    Ok(notes.join("; "))
}

fn c13(desk: &Desk) -> Outcome {
    let family = pattern_cfg(0).heldout_family();
    let models = desk.models("pattern-ga1", &pattern_cfg(1))?;
    let encoder = desk.accuracy(&models, &family, ga(100))?;
    let prior = desk.accuracy(&models, &family, SearchConfig { init: InitMode::Prior, ..ga(100) })?;
    check(encoder - prior >= 10.0, || format!("encoder init {encoder:.1}% vs prior init {prior:.1}%"))?;
    Ok(format!("encoder init {encoder:.1}% vs prior init {prior:.1}%"))
}

fn c14(desk: &Desk) -> Outcome {
    let mut cfg = TrainConfig::from_preset(Preset::Ood);
    cfg.inner_steps = 1;
    let models = desk.models("ood-ga1", &cfg)?;
    let mut family = cfg.heldout_family();
    family.config_mut().color_density = 1.0;
    let mean = desk.accuracy(&models, &family, SearchConfig::mean())?;
    let ga100 = desk.accuracy(&models, &family, ga(100))?;
    check(mean <= 5.0, || format!("mean inference {mean:.1}% > 5%"))?;
    check(ga100 >= 60.0, || format!("GA-100 {ga100:.1}% < 60%"))?;
    Ok(format!("density 1.0: mean {mean:.1}%, GA-100 {ga100:.1}%"))
}

fn c15(desk: &Desk) -> Outcome {
    let cfg = pattern_cfg(0);
    let models = desk.models("pattern-mean", &cfg)?;
    let family = cfg.heldout_family();
    let mean = desk.accuracy(&models, &family, SearchConfig::mean())?;
    let rs = desk.accuracy(&models, &family, SearchConfig::random_search(250))?;
    check((rs - mean).abs() <= 5.0, || format!("RS-250 {rs:.1}% vs mean {mean:.1}%"))?;
    Ok(format!("RS-250 {rs:.1}% vs mean {mean:.1}%"))
}

fn arc_smoke() -> Outcome {
    let mut cfg = TrainConfig::from_preset(Preset::Arc);
    cfg.steps = 100;
    cfg.batch_size = 1;
    cfg.micro_batch = 1;
    cfg.pairs = 2;
    cfg.family.config_mut().pairs_per_task = 2;
    let mut trainer = Trainer::init(cfg).map_err(|e| e.to_string())?;
    let ratio = trainer.model.reported_size() as f64 / Preset::Arc.reported_size();
    check((ratio - 1.0).abs() <= 0.02, || format!("size ratio {ratio:.4}"))?;
    let mut last = f64::NAN;
    trainer
        .run(|_, r| {
            last = r.loss.total;
            if !last.is_finite() {
                return Err(lpn::Error::Config(format!("loss {last} at step {}", r.step)));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("100 steps, final loss {last:.3}, size ratio {ratio:.4}"))
}

// Runner ----------------------------------------------------------------------

fn main() {
    let desk_on = std::env::var_os("LPN_DESK").is_some();
    let arc_on = std::env::var_os("LPN_ARC_SMOKE").is_some();
    let desk = Desk::from_env();
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let mut checks: Vec<(&str, &str, bool, Check)> = vec![
        ("1", "grid codec round-trip and pad independence", true, Box::new(c1_codec)),
        ("2", "latent and parameter gradient check", true, Box::new(c2_gradcheck)),
        ("2-info", "gradient check noise floor below preset widths (informational)", true, Box::new(gradcheck_noise_floor)),
        ("3", "KL closed form and Monte Carlo", true, Box::new(c3_kl)),
        ("4", "permutation invariance of aggregation", true, Box::new(c4_permutation)),
        ("5", "search identities", true, Box::new(c5_search)),
        ("6", "leave-one-out isolation", true, Box::new(c6_leave_one_out)),
        ("7", "causal masking", true, Box::new(c7_causal)),
        ("8", "checkpoint round-trip and golden file", true, Box::new(c8_checkpoint)),
        ("params", "overfit, pattern and arc sizes within 2%", true, Box::new(param_counts)),
        ("params-info", "tiny and ood sizes (informational)", true, Box::new(param_counts_rounded)),
        ("scaled-9", "decoder validation, scaled down", true, Box::new(scaled_decoder_validation)),
        ("arc-protocol", "GA sweep with top-2 on ARC-schema tasks", true, Box::new(arc_protocol)),
    ];
    let desk_checks: Vec<(&str, &str, Check)> = vec![
        ("9", "decoder validation, fixed program", Box::new(|| c9(&desk))),
        ("10", "pattern, mean training", Box::new(|| c10(&desk))),
        ("11", "pattern, GA-1 training", Box::new(|| c11(&desk))),
        ("12", "inference budget monotonicity", Box::new(|| c12(&desk))),
        ("13", "encoder init vs prior init", Box::new(|| c13(&desk))),
        ("14", "OOD density 1.0", Box::new(|| c14(&desk))),
        ("15", "random search vs mean", Box::new(|| c15(&desk))),
    ];
    for (id, what, f) in desk_checks {
        checks.push((id, what, desk_on, f));
    }
    checks.push(("arc-smoke", "ARC preset, 100 training steps", arc_on, Box::new(arc_smoke)));

    let mut failed = 0;
    for (id, what, enabled, f) in &checks {
        if !*enabled {
            let var = if *id == "arc-smoke" { "LPN_ARC_SMOKE" } else { "LPN_DESK" };
            println!("SKIP criterion {id}: {what} (desk-scale; set {var}=1)");
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) if id.ends_with("-info") => println!("INFO criterion {id}: {what} -- {detail} [{secs:.1}s]"),
            Ok(detail) => println!("PASS criterion {id}: {what} -- {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {id}: {what} -- {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
