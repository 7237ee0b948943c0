//! Pair encoder: one input/output pair to a diagonal Gaussian over latents.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{encode_sequence_with, Grid, GridSequence, Pair};
use crate::model::{embed_grids, grid_keys, ArchConfig, Model, ENC};
use crate::nn::layers::{self, transformer_stack};
use crate::nn::{AttnMask, Bound, Tape, Var};

pub const LOGVAR_MIN: f32 = -10.0;
pub const LOGVAR_MAX: f32 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPosterior {
    pub mean: Vec<f32>,
    pub log_var: Vec<f32>,
}

impl LatentPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Per-coordinate standard deviation.
    pub fn std(&self) -> Vec<f32> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

fn sequences(arch: &ArchConfig, pairs: &[(&Grid, &Grid)]) -> Result<(Vec<GridSequence>, Vec<GridSequence>)> {
    let layout = arch.layout();
    let mut ins = Vec::with_capacity(pairs.len());
    let mut outs = Vec::with_capacity(pairs.len());
    for (x, y) in pairs {
        ins.push(encode_sequence_with(x, layout)?);
        outs.push(encode_sequence_with(y, layout)?);
    }
    Ok((ins, outs))
}

/// Posterior means and clamped log-variances, each `[pairs, latent_dim]`.
pub fn encode_on_tape<'t>(p: &Bound<'t>, arch: &ArchConfig, pairs: &[(&Grid, &Grid)]) -> Result<(Var<'t>, Var<'t>)> {
    if pairs.is_empty() {
        return Err(Error::EmptySet("no pairs to encode"));
    }
    let (ins, outs) = sequences(arch, pairs)?;
    let n = pairs.len();
    let h = arch.encoder.hidden();
    let in_refs: Vec<&GridSequence> = ins.iter().collect();
    let out_refs: Vec<&GridSequence> = outs.iter().collect();
    let x_in = embed_grids(p, ENC, &in_refs, 0);
    let x_out = embed_grids(p, ENC, &out_refs, 1);
    let cls = p.get(&format!("{ENC}.cls")).reshape(&[1, 1, h]).broadcast_to(&[n, 1, h]);
    let x = Var::concat(&[x_in, x_out, cls], 1);
    let len = x.shape()[1];

    let mut keys = Vec::with_capacity(n * len);
    for (i, o) in ins.iter().zip(&outs) {
        keys.extend(grid_keys(i));
        keys.extend(grid_keys(o));
        keys.push(true);
    }
    let mask = Rc::new(AttnMask::new(n, len, keys, None));
    let y = transformer_stack(p, ENC, x, &arch.encoder, &mask, None)?;
    let cls_out = y.slice(1, len - 1, 1).reshape(&[n, h]);
    let z = layers::layer_norm(p, &format!("{ENC}.ln_out"), cls_out);
    let mean = layers::dense(p, &format!("{ENC}.mean"), z);
    let log_var = layers::dense(p, &format!("{ENC}.logvar"), z).clamp(LOGVAR_MIN, LOGVAR_MAX);
    Ok((mean, log_var))
}

fn split_rows(v: &[f32], d: usize) -> impl Iterator<Item = Vec<f32>> + '_ {
    v.chunks_exact(d).map(<[f32]>::to_vec)
}

/// Posteriors for every pair, encoded independently.
pub fn encode_pairs(model: &Model, pairs: &[Pair]) -> Result<Vec<LatentPosterior>> {
    let tape = Tape::inference();
    let p = model.params.bind(&tape, false);
    let refs: Vec<(&Grid, &Grid)> = pairs.iter().map(|p| (&p.input, &p.output)).collect();
    let (mean, log_var) = encode_on_tape(&p, &model.arch, &refs)?;
    let d = model.arch.latent_dim;
    let (mean, log_var) = (mean.value(), log_var.value());
    Ok(split_rows(mean.data(), d)
        .zip(split_rows(log_var.data(), d))
        .map(|(mean, log_var)| LatentPosterior { mean, log_var })
        .collect())
}

pub fn encode_pair(model: &Model, input: &Grid, output: &Grid) -> Result<LatentPosterior> {
    let pair = Pair {
        input: input.clone(),
        output: output.clone(),
    };
    Ok(encode_pairs(model, std::slice::from_ref(&pair))?.remove(0))
}

/// `mean + noise * exp(log_var / 2)`.
pub fn sample_latent(post: &LatentPosterior, noise: &[f32]) -> Vec<f32> {
    assert_eq!(noise.len(), post.dim(), "noise dimension differs from posterior");
    post.mean
        .iter()
        .zip(&post.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + e * (0.5 * lv).exp())
        .collect()
}

/// Arithmetic mean, summed per coordinate in sorted order so the result does
/// not depend on the order of `latents`.
pub fn aggregate_latents(latents: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = latents.first().ok_or(Error::EmptySet("no latents to aggregate"))?;
    let d = first.len();
    let mut column = Vec::with_capacity(latents.len());
    let mut out = Vec::with_capacity(d);
    for k in 0..d {
        column.clear();
        for z in latents {
            assert_eq!(z.len(), d, "latents of different dimensions");
            column.push(z[k]);
        }
        column.sort_by(f32::total_cmp);
        let sum: f64 = column.iter().map(|&v| v as f64).sum();
        out.push((sum / latents.len() as f64) as f32);
    }
    Ok(out)
}
