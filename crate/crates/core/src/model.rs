//! Architecture presets, parameter layout and token embeddings shared by the
//! encoder and decoder.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{GridSequence, SequenceLayout, MAX_SIDE, NUM_COLORS};
use crate::nn::layers::{self, StackConfig, INIT_STD};
use crate::nn::{Bound, ParamStore, Tensor, Var};

pub const ENC: &str = "enc";
pub const DEC: &str = "dec";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub encoder: StackConfig,
    pub decoder: StackConfig,
    pub latent_dim: usize,
    pub max_rows: usize,
    pub max_cols: usize,
}

impl ArchConfig {
    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout {
            max_rows: self.max_rows,
            max_cols: self.max_cols,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=MAX_SIDE).contains(&self.max_rows) || !(1..=MAX_SIDE).contains(&self.max_cols) {
            return bad(format!("layout {}x{} outside 1..={MAX_SIDE}", self.max_rows, self.max_cols));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        for (name, s) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            if s.heads == 0 || s.head_dim == 0 {
                return bad(format!("{name} needs at least one head of positive width"));
            }
            if s.layers > 0 && s.mlp_hidden() == 0 {
                return bad(format!("{name} MLP factor gives an empty hidden layer"));
            }
        }
        Ok(())
    }
}

/// Named hyperparameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Single-program decoder validation.
    Overfit,
    /// 10x10 grids with 4x4 patterns.
    Pattern,
    /// 4x4 grids with 2x2 patterns and a 2-D latent.
    Tiny,
    /// Pattern model used for the density-shift study.
    Ood,
    /// Full 30x30 ARC-sized model.
    Arc,
}

/// Training knobs that come with a preset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub pairs: usize,
    pub kl_coeff: f32,
    pub lr: f32,
    pub clip_norm: f32,
}

fn stack(layers: usize, heads: usize, head_dim: usize, mlp_factor: f32) -> StackConfig {
    StackConfig {
        layers,
        heads,
        head_dim,
        mlp_factor,
    }
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Overfit, Preset::Pattern, Preset::Tiny, Preset::Ood, Preset::Arc];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Overfit => "overfit",
            Preset::Pattern => "pattern",
            Preset::Tiny => "tiny",
            Preset::Ood => "ood",
            Preset::Arc => "arc",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn arch(&self) -> ArchConfig {
        let (encoder, decoder, latent_dim, side) = match self {
            Preset::Overfit => (stack(0, 6, 16, 1.0), stack(3, 6, 16, 1.0), 32, 30),
            Preset::Pattern => (stack(2, 6, 16, 1.0), stack(2, 6, 16, 1.0), 32, 10),
            Preset::Tiny => (stack(2, 6, 12, 4.0), stack(2, 6, 12, 4.0), 2, 4),
            Preset::Ood => (stack(4, 8, 8, 2.0), stack(2, 8, 4, 1.0), 32, 10),
            Preset::Arc => (stack(4, 8, 32, 4.0), stack(8, 8, 32, 4.0), 256, 30),
        };
        ArchConfig {
            encoder,
            decoder,
            latent_dim,
            max_rows: side,
            max_cols: side,
        }
    }

    pub fn training(&self) -> PresetTraining {
        let (steps, kl_coeff) = match self {
            Preset::Overfit => (10_000, 1e-4),
            Preset::Pattern => (20_000, 1e-4),
            Preset::Tiny => (200_000, 1e-3),
            Preset::Ood => (100_000, 1e-4),
            Preset::Arc => (220_000, 1e-4),
        };
        PresetTraining {
            steps,
            batch_size: 128,
            pairs: 4,
            kl_coeff,
            lr: 4e-4,
            clip_norm: 1.0,
        }
    }

    /// Model size as published for this preset, in the units of
    /// [`Model::reported_size`].
    pub fn reported_size(&self) -> f64 {
        match self {
            Preset::Overfit => 829e3,
            Preset::Pattern => 973e3,
            Preset::Tiny => 1e6,
            Preset::Ood => 1e6,
            Preset::Arc => 39e6,
        }
    }
}

/// Encoder and decoder weights together with their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: ParamStore,
}

fn init_embeddings(store: &mut ParamStore, prefix: &str, arch: &ArchConfig, hidden: usize, rng: &mut ChaCha8Rng) {
    let mut table = |name: &str, rows: usize| {
        store.insert_trunc_normal(&format!("{prefix}.{name}"), &[rows, hidden], INIT_STD, rng)
    };
    table("color", NUM_COLORS);
    table("row", arch.max_rows);
    table("col", arch.max_cols);
    table("channel", 2);
    table("shape_rows", arch.max_rows);
    table("shape_cols", arch.max_cols);
    table("shape_pos", 2);
}

impl Model {
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Model> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (he, hd, d) = (arch.encoder.hidden(), arch.decoder.hidden(), arch.latent_dim);

        init_embeddings(&mut p, ENC, &arch, he, &mut rng);
        p.insert_trunc_normal(&format!("{ENC}.cls"), &[1, he], INIT_STD, &mut rng);
        layers::init_stack(&mut p, ENC, &arch.encoder, &mut rng);
        layers::init_layer_norm(&mut p, &format!("{ENC}.ln_out"), he);
        layers::init_dense(&mut p, &format!("{ENC}.mean"), he, d, true, &mut rng);
        layers::init_dense(&mut p, &format!("{ENC}.logvar"), he, d, true, &mut rng);

        init_embeddings(&mut p, DEC, &arch, hd, &mut rng);
        p.insert_trunc_normal(&format!("{DEC}.latent_pos"), &[1, hd], INIT_STD, &mut rng);
        layers::init_dense(&mut p, &format!("{DEC}.latent_proj"), d, hd, true, &mut rng);
        layers::init_stack(&mut p, DEC, &arch.decoder, &mut rng);
        layers::init_layer_norm(&mut p, &format!("{DEC}.ln_out"), hd);
        layers::init_dense(&mut p, &format!("{DEC}.rows_head"), hd, arch.max_rows, true, &mut rng);
        layers::init_dense(&mut p, &format!("{DEC}.cols_head"), hd, arch.max_cols, true, &mut rng);
        layers::init_dense(&mut p, &format!("{DEC}.color_head"), hd, NUM_COLORS, true, &mut rng);
        Ok(Model { arch, params: p })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Size in bytes of the f32 weights, the unit published model sizes use.
    pub fn reported_size(&self) -> usize {
        4 * self.param_count()
    }
}

/// Sum of a pixel's color, row, column and channel embeddings, or a shape
/// token's value, slot and channel embeddings, for every token of `seqs`.
/// Returns `[seqs.len(), 2 + pixels, hidden]`.
pub(crate) fn embed_grids<'t>(p: &Bound<'t>, prefix: &str, seqs: &[&GridSequence], channel: usize) -> Var<'t> {
    let n = seqs.len();
    let layout = seqs[0].layout;
    let pixels = layout.pixels();
    let tab = |name: &str| p.get(&format!("{prefix}.{name}"));
    let hidden = tab("color").shape()[1];

    let colors: Rc<[usize]> = seqs
        .iter()
        .flat_map(|s| s.pixel_tokens.iter().map(|&c| c as usize))
        .collect();
    let rows: Rc<[usize]> = (0..pixels).map(|k| k / layout.max_cols).collect();
    let cols: Rc<[usize]> = (0..pixels).map(|k| k % layout.max_cols).collect();
    let pos = tab("row").gather_rows(rows).add(tab("col").gather_rows(cols));
    let pix = tab("color").gather_rows(colors).reshape(&[n, pixels, hidden]).add(pos);

    let shape_rows: Rc<[usize]> = seqs.iter().map(|s| s.shape_tokens[0] as usize - 1).collect();
    let shape_cols: Rc<[usize]> = seqs.iter().map(|s| s.shape_tokens[1] as usize - 1).collect();
    let sr = tab("shape_rows").gather_rows(shape_rows).reshape(&[n, 1, hidden]);
    let sc = tab("shape_cols").gather_rows(shape_cols).reshape(&[n, 1, hidden]);
    let shape = Var::concat(&[sr, sc], 1).add(tab("shape_pos"));

    let ch = tab("channel").gather_rows(Rc::from(vec![channel]));
    Var::concat(&[shape, pix], 1).add(ch)
}

/// Key visibility for one grid sequence: shape tokens, then real cells.
pub(crate) fn grid_keys(seq: &GridSequence) -> impl Iterator<Item = bool> + '_ {
    [true, true].into_iter().chain(seq.pad_mask.iter().copied())
}

/// A single token as the decoder sees it during generation.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Token {
    Shape { slot: usize, value: usize },
    Pixel { row: usize, col: usize, color: u8 },
}

/// Embedding of one token without a tape, matching [`embed_grids`].
pub(crate) fn embed_token(store: &ParamStore, prefix: &str, token: Token, channel: usize) -> Vec<f32> {
    let row_of = |name: &str, i: usize| -> &[f32] {
        let t: &Tensor = store.get(&format!("{prefix}.{name}"));
        let h = t.shape()[1];
        &t.data()[i * h..(i + 1) * h]
    };
    let parts: [&[f32]; 4] = match token {
        Token::Shape { slot, value } => {
            let table = if slot == 0 { "shape_rows" } else { "shape_cols" };
            [row_of(table, value - 1), row_of("shape_pos", slot), row_of("channel", channel), &[]]
        }
        Token::Pixel { row, col, color } => [
            row_of("color", color as usize),
            row_of("row", row),
            row_of("col", col),
            row_of("channel", channel),
        ],
    };
    match token {
        // Same association order as the batched path.
        Token::Shape { .. } => parts[0]
            .iter()
            .zip(parts[1])
            .zip(parts[2])
            .map(|((a, b), c)| (a + b) + c)
            .collect(),
        Token::Pixel { .. } => parts[0]
            .iter()
            .zip(parts[1])
            .zip(parts[2])
            .zip(parts[3])
            .map(|(((c, r), k), ch)| (c + (r + k)) + ch)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_have_expected_shapes() {
        for p in Preset::ALL {
            p.arch().validate().unwrap();
            assert_eq!(Preset::parse(p.name()), Some(p));
        }
        assert_eq!(Preset::Pattern.arch().encoder.hidden(), 96);
        assert_eq!(Preset::Arc.arch().layout().seq_len(), 902);
        assert_eq!(Preset::Pattern.training().batch_size, 128);
    }

    #[test]
    fn pattern_model_size_is_close_to_published() {
        let m = Model::init(Preset::Pattern.arch(), 0).unwrap();
        let ratio = m.reported_size() as f64 / Preset::Pattern.reported_size();
        assert!((ratio - 1.0).abs() <= 0.02, "ratio {ratio}");
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::init(Preset::Tiny.arch(), 3).unwrap();
        let b = Model::init(Preset::Tiny.arch(), 3).unwrap();
        let c = Model::init(Preset::Tiny.arch(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
