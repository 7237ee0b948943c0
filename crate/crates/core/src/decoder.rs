//! Latent-conditioned output decoder.
//!
//! The decoder reads `[latent token, input grid, target grid]`. Attention is
//! bidirectional over the latent and input, causal over the target, and target
//! padding is hidden using the target's own shape tokens. Each target token is
//! predicted from the embedding that precedes it in raster order over the real
//! cells: rows from the latent token, cols from the rows token, the first cell
//! from the cols token, and the first cell of a row from the last real cell of
//! the row above.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{encode_sequence_with, Grid, GridSequence, Pair, NUM_COLORS};
use crate::model::{embed_grids, embed_token, grid_keys, ArchConfig, Model, Token, DEC};
use crate::nn::layers::{self, stack_step, transformer_stack, StackCache};
use crate::nn::tensor::log_softmax_last;
use crate::nn::{AttnMask, Bound, ParamStore, Tape, Tensor, Var};

/// Decoder hidden states `[pairs, 1 + 2 * grid_len, hidden]`.
fn hidden_states<'t>(
    p: &Bound<'t>,
    arch: &ArchConfig,
    inputs: &[GridSequence],
    targets: &[GridSequence],
    z: Var<'t>,
) -> Result<Var<'t>> {
    let n = inputs.len();
    let h = arch.decoder.hidden();
    let latent = layers::dense(p, &format!("{DEC}.latent_proj"), z)
        .add(p.get(&format!("{DEC}.latent_pos")))
        .reshape(&[n, 1, h]);
    let ins: Vec<&GridSequence> = inputs.iter().collect();
    let tgs: Vec<&GridSequence> = targets.iter().collect();
    let x = Var::concat(&[latent, embed_grids(p, DEC, &ins, 0), embed_grids(p, DEC, &tgs, 1)], 1);
    let len = x.shape()[1];
    let mut keys = Vec::with_capacity(n * len);
    for (i, t) in inputs.iter().zip(targets) {
        keys.push(true);
        keys.extend(grid_keys(i));
        keys.extend(grid_keys(t));
    }
    let target_start = 1 + arch.layout().seq_len();
    let mask = Rc::new(AttnMask::new(n, len, keys, Some(target_start)));
    Ok(transformer_stack(p, DEC, x, &arch.decoder, &mask, None)?)
}

/// Which flattened hidden state predicts each target token.
struct Predictors {
    rows_at: Vec<usize>,
    rows: Vec<usize>,
    cols_at: Vec<usize>,
    cols: Vec<usize>,
    cells_at: Vec<usize>,
    cells: Vec<usize>,
    cell_pair: Vec<usize>,
    /// Raster index of each cell in the padded layout.
    cell_slot: Vec<usize>,
}

fn predictors(arch: &ArchConfig, targets: &[Grid]) -> Predictors {
    let grid_len = arch.layout().seq_len();
    let stride = 1 + 2 * grid_len;
    let start = 1 + grid_len;
    let mc = arch.max_cols;
    let mut pr = Predictors {
        rows_at: Vec::new(),
        rows: Vec::new(),
        cols_at: Vec::new(),
        cols: Vec::new(),
        cells_at: Vec::new(),
        cells: Vec::new(),
        cell_pair: Vec::new(),
        cell_slot: Vec::new(),
    };
    for (k, y) in targets.iter().enumerate() {
        let base = k * stride;
        let cell = |i: usize, j: usize| base + start + 2 + i * mc + j;
        pr.rows_at.push(base);
        pr.rows.push(y.rows() - 1);
        pr.cols_at.push(base + start);
        pr.cols.push(y.cols() - 1);
        for i in 0..y.rows() {
            for j in 0..y.cols() {
                let at = match (i, j) {
                    (0, 0) => base + start + 1,
                    (_, 0) => cell(i - 1, y.cols() - 1),
                    _ => cell(i, j - 1),
                };
                pr.cells_at.push(at);
                pr.cells.push(y.get(i, j) as usize);
                pr.cell_pair.push(k);
                pr.cell_slot.push(i * mc + j);
            }
        }
    }
    pr
}

fn rc(v: &[usize]) -> Rc<[usize]> {
    Rc::from(v.to_vec())
}

fn head_logprobs<'t>(p: &Bound<'t>, flat: Var<'t>, at: &[usize], head: &str) -> Var<'t> {
    let h = flat.gather_rows(rc(at));
    let h = layers::layer_norm(p, &format!("{DEC}.ln_out"), h);
    layers::dense(p, &format!("{DEC}.{head}"), h).log_softmax()
}

fn encode_all(arch: &ArchConfig, grids: &[&Grid]) -> Result<Vec<GridSequence>> {
    let layout = arch.layout();
    Ok(grids
        .iter()
        .map(|g| encode_sequence_with(g, layout))
        .collect::<std::result::Result<_, _>>()?)
}

/// Per-token log-probabilities of the targets under teacher forcing.
pub struct TokenLogProbs<'t> {
    /// `[pairs]`
    pub rows: Var<'t>,
    /// `[pairs]`
    pub cols: Var<'t>,
    /// One entry per real target cell, pair by pair in raster order.
    pub cells: Var<'t>,
    /// Owning pair of each entry of `cells`.
    pub cell_pair: Rc<[usize]>,
}

impl<'t> TokenLogProbs<'t> {
    /// Per-pair totals as a `[pairs]` tape value.
    pub fn per_pair(&self) -> Var<'t> {
        let n = self.rows.shape()[0];
        let cells = self.cells.scatter_rows(Rc::clone(&self.cell_pair), n);
        self.rows.add(self.cols).add(cells)
    }

    /// Sum over pairs of every token, accumulated in f64 pair by pair.
    pub fn total_f64(&self) -> f64 {
        let (rows, cols, cells) = (self.rows.value(), self.cols.value(), self.cells.value());
        let mut per_pair: Vec<f64> = rows
            .data()
            .iter()
            .zip(cols.data())
            .map(|(&r, &c)| r as f64 + c as f64)
            .collect();
        for (&k, &v) in self.cell_pair.iter().zip(cells.data()) {
            per_pair[k] += v as f64;
        }
        per_pair.iter().sum()
    }
}

/// Token log-probabilities of each `y` given `x` and `z: [pairs, latent_dim]`.
pub fn token_logprobs<'t>(
    p: &Bound<'t>,
    arch: &ArchConfig,
    pairs: &[(&Grid, &Grid)],
    z: Var<'t>,
) -> Result<TokenLogProbs<'t>> {
    if pairs.is_empty() {
        return Err(Error::EmptySet("no pairs to score"));
    }
    check_latent(arch, &z.shape(), pairs.len())?;
    let xs: Vec<&Grid> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<&Grid> = pairs.iter().map(|p| p.1).collect();
    let hidden = hidden_states(p, arch, &encode_all(arch, &xs)?, &encode_all(arch, &ys)?, z)?;
    let s = hidden.shape();
    let flat = hidden.reshape(&[s[0] * s[1], s[2]]);
    let targets: Vec<Grid> = ys.into_iter().cloned().collect();
    let pr = predictors(arch, &targets);
    Ok(TokenLogProbs {
        rows: head_logprobs(p, flat, &pr.rows_at, "rows_head").pick(rc(&pr.rows)),
        cols: head_logprobs(p, flat, &pr.cols_at, "cols_head").pick(rc(&pr.cols)),
        cells: head_logprobs(p, flat, &pr.cells_at, "color_head").pick(rc(&pr.cells)),
        cell_pair: rc(&pr.cell_pair),
    })
}

/// Per-pair log-likelihood `log p(y | x, z)` as a `[pairs]` tape value.
pub fn loglik_on_tape<'t>(p: &Bound<'t>, arch: &ArchConfig, pairs: &[(&Grid, &Grid)], z: Var<'t>) -> Result<Var<'t>> {
    Ok(token_logprobs(p, arch, pairs, z)?.per_pair())
}

fn check_latent(arch: &ArchConfig, shape: &[usize], n: usize) -> Result<()> {
    if shape != [n, arch.latent_dim] {
        return Err(Error::WrongLatentDim {
            expected: arch.latent_dim,
            got: *shape.last().unwrap_or(&0),
        });
    }
    Ok(())
}

/// Logits of every target token under teacher forcing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputLogits {
    /// Over row counts `1..=max_rows`.
    pub rows: Vec<f32>,
    /// Over column counts `1..=max_cols`.
    pub cols: Vec<f32>,
    /// `[max_rows * max_cols, 10]` in padded raster order; rows outside the
    /// target's shape are zero.
    pub grid: Vec<f32>,
    pub log_likelihood: f64,
}

pub fn output_logits(model: &Model, input: &Grid, target: &Grid, z: &[f32]) -> Result<OutputLogits> {
    let arch = &model.arch;
    let tape = Tape::inference();
    let p = model.params.bind(&tape, false);
    let zv = tape.constant(Tensor::new([1, z.len()], z.to_vec()));
    check_latent(arch, &zv.shape(), 1)?;
    let hidden = hidden_states(&p, arch, &encode_all(arch, &[input])?, &encode_all(arch, &[target])?, zv)?;
    let s = hidden.shape();
    let flat = hidden.reshape(&[s[0] * s[1], s[2]]);
    let pr = predictors(arch, std::slice::from_ref(target));
    let logits = |at: &[usize], head: &str| {
        let h = layers::layer_norm(&p, &format!("{DEC}.ln_out"), flat.gather_rows(rc(at)));
        layers::dense(&p, &format!("{DEC}.{head}"), h).value()
    };
    let rows = logits(&pr.rows_at, "rows_head");
    let cols = logits(&pr.cols_at, "cols_head");
    let cells = logits(&pr.cells_at, "color_head");
    let mut grid = vec![0.0f32; arch.layout().pixels() * NUM_COLORS];
    for (k, &slot) in pr.cell_slot.iter().enumerate() {
        grid[slot * NUM_COLORS..(slot + 1) * NUM_COLORS]
            .copy_from_slice(&cells.data()[k * NUM_COLORS..(k + 1) * NUM_COLORS]);
    }
    let ll = token_logprobs(&p, arch, &[(input, target)], zv)?.total_f64();
    Ok(OutputLogits {
        rows: rows.into_vec(),
        cols: cols.into_vec(),
        grid,
        log_likelihood: ll,
    })
}

fn pair_refs(pairs: &[Pair]) -> Vec<(&Grid, &Grid)> {
    pairs.iter().map(|p| (&p.input, &p.output)).collect()
}

fn shared_latent<'t>(tape: &'t Tape, z: &[f32], n: usize, trainable: bool) -> (Var<'t>, Var<'t>) {
    let t = Tensor::new([1, z.len()], z.to_vec());
    let zv = if trainable { tape.var(t) } else { tape.constant(t) };
    (zv, zv.broadcast_to(&[n, z.len()]))
}

/// `sum_i log p(y_i | x_i, z)` over the given pairs.
pub fn batched_loglik(model: &Model, pairs: &[Pair], z: &[f32]) -> Result<f64> {
    let tape = Tape::inference();
    let p = model.params.bind(&tape, false);
    let (_, zs) = shared_latent(&tape, z, pairs.len().max(1), false);
    Ok(token_logprobs(&p, &model.arch, &pair_refs(pairs), zs)?.total_f64())
}

/// [`batched_loglik`] and its gradient with respect to `z`.
pub fn loglik_and_grad(model: &Model, pairs: &[Pair], z: &[f32]) -> Result<(f64, Vec<f32>)> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let (zv, zs) = shared_latent(&tape, z, pairs.len().max(1), true);
    let terms = token_logprobs(&p, &model.arch, &pair_refs(pairs), zs)?;
    let total = terms.per_pair().sum();
    let g = tape.grad(total, &[zv], None, false)[0].value();
    Ok((terms.total_f64(), g.into_vec()))
}

/// [`batched_loglik`] and its gradient with respect to every parameter.
pub fn loglik_and_param_grads(model: &Model, pairs: &[Pair], z: &[f32]) -> Result<(f64, ParamStore)> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, true);
    let (_, zs) = shared_latent(&tape, z, pairs.len().max(1), false);
    let terms = token_logprobs(&p, &model.arch, &pair_refs(pairs), zs)?;
    let grads = p.grads(terms.per_pair().sum());
    Ok((terms.total_f64(), grads))
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn head_single(model: &Model, head: &str, h: &[f32]) -> Vec<f32> {
    let hn = layers::layer_norm_single(&model.params, &format!("{DEC}.ln_out"), h);
    layers::dense_single(&model.params, &format!("{DEC}.{head}"), &hn)
}

/// Greedy choice and its log-probability.
fn choose(logits: &[f32]) -> (usize, f64) {
    let k = argmax(logits);
    let lp = log_softmax_last(&Tensor::new([logits.len()], logits.to_vec()));
    (k, lp.data()[k] as f64)
}

/// Greedy decoding; also returns the summed log-probability of the chosen
/// tokens.
pub fn generate_scored(model: &Model, input: &Grid, z: &[f32]) -> Result<(Grid, f64)> {
    let arch = &model.arch;
    if z.len() != arch.latent_dim {
        return Err(Error::WrongLatentDim {
            expected: arch.latent_dim,
            got: z.len(),
        });
    }
    let seq = encode_sequence_with(input, arch.layout())?;
    let tape = Tape::inference();
    let p = model.params.bind(&tape, false);
    let h = arch.decoder.hidden();
    let zv = tape.constant(Tensor::new([1, z.len()], z.to_vec()));
    let latent = layers::dense(&p, &format!("{DEC}.latent_proj"), zv)
        .add(p.get(&format!("{DEC}.latent_pos")))
        .reshape(&[1, 1, h]);
    let x = Var::concat(&[latent, embed_grids(&p, DEC, &[&seq], 0)], 1);
    let keys: Vec<bool> = std::iter::once(true).chain(grid_keys(&seq)).collect();
    let len = keys.len();
    let mask = Rc::new(AttnMask::new(1, len, keys.clone(), None));
    let mut capture = Vec::new();
    let prefix = transformer_stack(&p, DEC, x, &arch.decoder, &mask, Some(&mut capture))?.value();
    let mut cache = StackCache::from_capture(&capture, keys);
    let step = |cache: &mut StackCache, token: Token| {
        let e = embed_token(&model.params, DEC, token, 1);
        stack_step(&model.params, DEC, &arch.decoder, &e, cache)
    };

    let (r, lp_r) = choose(&head_single(model, "rows_head", &prefix.data()[..h]));
    let rows = r + 1;
    let hr = step(&mut cache, Token::Shape { slot: 0, value: rows });
    let (c, lp_c) = choose(&head_single(model, "cols_head", &hr));
    let cols = c + 1;
    let mut last = step(&mut cache, Token::Shape { slot: 1, value: cols });
    let mut score = lp_r + lp_c;
    let mut cells = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let (color, lp) = choose(&head_single(model, "color_head", &last));
            score += lp;
            cells.push(color as u8);
            if i + 1 < rows || j + 1 < cols {
                last = step(
                    &mut cache,
                    Token::Pixel {
                        row: i,
                        col: j,
                        color: color as u8,
                    },
                );
            }
        }
    }
    Ok((Grid::new(rows, cols, cells)?, score))
}

pub fn generate(model: &Model, input: &Grid, z: &[f32]) -> Result<Grid> {
    Ok(generate_scored(model, input, z)?.0)
}
