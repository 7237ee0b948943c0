//! Dense, normalization and pre-norm transformer layers.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamStore};
use super::tape::{AttnMask, Var};
use super::tensor::{self, Tensor};
use super::NnError;

pub const INIT_STD: f32 = 0.02;
pub const LN_EPS: f32 = 1e-6;

/// Shape of one transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_factor: f32,
}

impl StackConfig {
    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_factor * self.hidden() as f32).round() as usize
    }
}

pub fn init_dense<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) {
    store.insert_trunc_normal(&format!("{name}.w"), &[fan_in, fan_out], INIT_STD, rng);
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros([fan_out]));
    }
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.scale"), Tensor::full([dim], 1.0));
    store.insert(format!("{name}.bias"), Tensor::zeros([dim]));
}

pub fn init_stack<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &StackConfig, rng: &mut R) {
    let h = cfg.hidden();
    let f = cfg.mlp_hidden();
    for l in 0..cfg.layers {
        let b = format!("{prefix}.block{l}");
        init_layer_norm(store, &format!("{b}.ln1"), h);
        for proj in ["q", "k", "v", "o"] {
            init_dense(store, &format!("{b}.attn.{proj}"), h, h, false, rng);
        }
        init_layer_norm(store, &format!("{b}.ln2"), h);
        init_dense(store, &format!("{b}.mlp.up"), h, f, false, rng);
        init_dense(store, &format!("{b}.mlp.down"), f, h, false, rng);
    }
}

/// `x @ w (+ b)` over the last axis; the bias is used when the store has one.
pub fn dense<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Var<'t> {
    let y = x.mm(p.get(&format!("{name}.w")));
    match p.try_get(&format!("{name}.b")) {
        Some(b) => y.add(b),
        None => y,
    }
}

pub fn layer_norm<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Var<'t> {
    let xc = x.sub(x.mean_last());
    let inv = xc.square().mean_last().add_scalar(LN_EPS).rsqrt();
    xc.mul(inv)
        .mul(p.get(&format!("{name}.scale")))
        .add(p.get(&format!("{name}.bias")))
}

/// Keys and values of one attention layer, `[batch, heads, len, head_dim]`.
pub type KvCapture = Vec<(Tensor, Tensor)>;

pub fn attention<'t>(
    p: &Bound<'t>,
    name: &str,
    x: Var<'t>,
    cfg: &StackConfig,
    mask: &Rc<AttnMask>,
    capture: Option<&mut KvCapture>,
) -> Var<'t> {
    let s = x.shape();
    let (b, t) = (s[0], s[1]);
    let (h, d) = (cfg.heads, cfg.head_dim);
    let split = |v: Var<'t>| v.reshape(&[b, t, h, d]).swap12();
    let q = split(dense(p, &format!("{name}.q"), x));
    let k = split(dense(p, &format!("{name}.k"), x));
    let v = split(dense(p, &format!("{name}.v"), x));
    if let Some(c) = capture {
        c.push((k.value(), v.value()));
    }
    let probs = q.attn_probs(k, Rc::clone(mask), 1.0 / (d as f32).sqrt());
    let o = probs.mm(v).swap12().reshape(&[b, t, h * d]);
    dense(p, &format!("{name}.o"), o)
}

pub fn mlp<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Var<'t> {
    let hidden = dense(p, &format!("{name}.up"), x).silu();
    dense(p, &format!("{name}.down"), hidden)
}

/// Pre-norm residual blocks over `x: [batch, len, hidden]`.
pub fn transformer_stack<'t>(
    p: &Bound<'t>,
    prefix: &str,
    x: Var<'t>,
    cfg: &StackConfig,
    mask: &Rc<AttnMask>,
    mut capture: Option<&mut KvCapture>,
) -> Result<Var<'t>, NnError> {
    let s = x.shape();
    if s.len() != 3 || s[2] != cfg.hidden() {
        return Err(NnError::ShapeMismatch(format!(
            "expected [batch, len, {}], got {s:?}",
            cfg.hidden()
        )));
    }
    if (mask.batch(), mask.len()) != (s[0], s[1]) {
        return Err(NnError::ShapeMismatch(format!(
            "mask is {}x{} but sequence is {}x{}",
            mask.batch(),
            mask.len(),
            s[0],
            s[1]
        )));
    }
    let mut x = x;
    for l in 0..cfg.layers {
        let b = format!("{prefix}.block{l}");
        let a = attention(p, &format!("{b}.attn"), layer_norm(p, &format!("{b}.ln1"), x), cfg, mask, capture.as_deref_mut());
        x = x.add(a);
        x = x.add(mlp(p, &format!("{b}.mlp"), layer_norm(p, &format!("{b}.ln2"), x)));
    }
    Ok(x)
}

/// Single-sequence key/value cache for incremental decoding.
#[derive(Clone, Debug)]
pub struct StackCache {
    /// Per layer, keys and values laid out `[pos][head][dim]`.
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    visible: Vec<bool>,
}

impl StackCache {
    /// Builds a cache from keys/values captured on a batch-of-one pass.
    pub fn from_capture(capture: &KvCapture, visible: Vec<bool>) -> Self {
        let mut keys = Vec::with_capacity(capture.len());
        let mut values = Vec::with_capacity(capture.len());
        for (k, v) in capture {
            let s = k.shape();
            assert_eq!(s[0], 1, "cache is built from a single sequence");
            assert_eq!(s[2], visible.len());
            keys.push(tensor::swap12(k).into_vec());
            values.push(tensor::swap12(v).into_vec());
        }
        Self {
            keys,
            values,
            visible,
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }
}

fn layer_norm_vec(store: &ParamStore, name: &str, x: &[f32]) -> Vec<f32> {
    let n = x.len() as f64;
    let mean = (tensor::sum_f64(x) / n) as f32;
    let xc: Vec<f32> = x.iter().map(|v| v - mean).collect();
    let var = (xc.iter().map(|&v| (v * v) as f64).sum::<f64>() / n) as f32;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    let scale = store.get(&format!("{name}.scale")).data();
    let bias = store.get(&format!("{name}.bias")).data();
    xc.iter()
        .zip(scale)
        .zip(bias)
        .map(|((v, s), b)| v * inv * s + b)
        .collect()
}

fn dense_vec(store: &ParamStore, name: &str, x: &[f32]) -> Vec<f32> {
    let w = store.get(&format!("{name}.w"));
    let n = w.shape()[1];
    let mut out = vec![0.0f32; n];
    tensor::gemm(1, x.len(), n, 1.0, x, false, w.data(), false, &mut out);
    if let Some(b) = store.try_get(&format!("{name}.b")) {
        for (o, v) in out.iter_mut().zip(b.data()) {
            *o += v;
        }
    }
    out
}

/// Runs one new token through the stack, appending its keys and values to
/// `cache`. The token sees every visible cached position and itself.
pub fn stack_step(store: &ParamStore, prefix: &str, cfg: &StackConfig, x: &[f32], cache: &mut StackCache) -> Vec<f32> {
    let (h, d) = (cfg.heads, cfg.head_dim);
    let scale = 1.0 / (d as f32).sqrt();
    let mut x = x.to_vec();
    cache.visible.push(true);
    let len = cache.visible.len();
    for l in 0..cfg.layers {
        let b = format!("{prefix}.block{l}");
        let hn = layer_norm_vec(store, &format!("{b}.ln1"), &x);
        let q = dense_vec(store, &format!("{b}.attn.q"), &hn);
        cache.keys[l].extend(dense_vec(store, &format!("{b}.attn.k"), &hn));
        cache.values[l].extend(dense_vec(store, &format!("{b}.attn.v"), &hn));
        let mut o = vec![0.0f32; h * d];
        let mut scores = vec![0.0f32; len];
        for head in 0..h {
            let qh = &q[head * d..(head + 1) * d];
            for (pos, s) in scores.iter_mut().enumerate() {
                let kh = &cache.keys[l][(pos * h + head) * d..(pos * h + head + 1) * d];
                *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale;
            }
            tensor::masked_softmax_row(&mut scores, |pos| cache.visible[pos]);
            let oh = &mut o[head * d..(head + 1) * d];
            for (pos, &w) in scores.iter().enumerate() {
                if w != 0.0 {
                    let vh = &cache.values[l][(pos * h + head) * d..(pos * h + head + 1) * d];
                    for (acc, v) in oh.iter_mut().zip(vh) {
                        *acc += w * v;
                    }
                }
            }
        }
        for (xi, a) in x.iter_mut().zip(dense_vec(store, &format!("{b}.attn.o"), &o)) {
            *xi += a;
        }
        let hn = layer_norm_vec(store, &format!("{b}.ln2"), &x);
        let up: Vec<f32> = dense_vec(store, &format!("{b}.mlp.up"), &hn)
            .into_iter()
            .map(|v| v / (1.0 + (-v).exp()))
            .collect();
        for (xi, m) in x.iter_mut().zip(dense_vec(store, &format!("{b}.mlp.down"), &up)) {
            *xi += m;
        }
    }
    x
}

/// Final layer norm for a single vector, matching [`layer_norm`].
pub fn layer_norm_single(store: &ParamStore, name: &str, x: &[f32]) -> Vec<f32> {
    layer_norm_vec(store, name, x)
}

/// Dense layer for a single vector, matching [`dense`].
pub fn dense_single(store: &ParamStore, name: &str, x: &[f32]) -> Vec<f32> {
    dense_vec(store, name, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(layers: usize) -> StackConfig {
        StackConfig {
            layers,
            heads: 2,
            head_dim: 3,
            mlp_factor: 2.0,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn empty_stack_is_identity() {
        let store = ParamStore::new();
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.constant(random_input(&mut rng, &[2, 4, 6]));
        let mask = Rc::new(AttnMask::full(2, 4));
        let y = transformer_stack(&p, "s", x, &cfg(0), &mask, None).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn zero_block_weights_give_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_stack(&mut store, "s", &cfg(2), &mut rng);
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(random_input(&mut rng, &[1, 5, 6]));
        let mask = Rc::new(AttnMask::full(1, 5));
        let y = transformer_stack(&p, "s", x, &cfg(2), &mask, None).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn masked_token_does_not_leak_into_unmasked_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        init_stack(&mut store, "s", &cfg(2), &mut rng);
        let mask = Rc::new(AttnMask::new(1, 4, vec![true, false, true, true], None));
        let x0 = random_input(&mut rng, &[1, 4, 6]);
        let mut x1 = x0.clone();
        for v in &mut x1.data_mut()[6..12] {
            *v += 5.0;
        }
        let run = |x: &Tensor| {
            let tape = Tape::inference();
            let p = store.bind(&tape, false);
            transformer_stack(&p, "s", tape.constant(x.clone()), &cfg(2), &mask, None)
                .unwrap()
                .value()
        };
        let (y0, y1) = (run(&x0), run(&x1));
        for t in [0, 2, 3] {
            assert_eq!(y0.data()[t * 6..(t + 1) * 6], y1.data()[t * 6..(t + 1) * 6]);
        }
    }

    #[test]
    fn query_with_no_visible_keys_gets_zero_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        init_stack(&mut store, "s", &cfg(1), &mut rng);
        let tape = Tape::inference();
        let p = store.bind(&tape, false);
        let x = tape.constant(random_input(&mut rng, &[1, 3, 6]));
        let mask = Rc::new(AttnMask::new(1, 3, vec![false; 3], None));
        let xn = layer_norm(&p, "s.block0.ln1", x);
        let a = attention(&p, "s.block0.attn", xn, &cfg(1), &mask, None);
        assert!(a.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_width_is_a_shape_mismatch() {
        let store = ParamStore::new();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(Tensor::zeros([1, 2, 5]));
        let mask = Rc::new(AttnMask::full(1, 2));
        assert!(matches!(
            transformer_stack(&p, "s", x, &cfg(0), &mask, None),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn incremental_step_matches_causal_pass() {
        let c = cfg(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        init_stack(&mut store, "s", &c, &mut rng);
        let x = random_input(&mut rng, &[1, 5, 6]);
        let mask = Rc::new(AttnMask::new(1, 5, vec![true, false, true, true, true], Some(3)));
        let tape = Tape::inference();
        let p = store.bind(&tape, false);
        let full = transformer_stack(&p, "s", tape.constant(x.clone()), &c, &mask, None).unwrap().value();

        let prefix_mask = Rc::new(AttnMask::new(1, 3, vec![true, false, true], None));
        let mut capture = Vec::new();
        let prefix = tensor::slice(&x, 1, 0, 3);
        transformer_stack(&p, "s", tape.constant(prefix), &c, &prefix_mask, Some(&mut capture)).unwrap();
        let mut cache = StackCache::from_capture(&capture, vec![true, false, true]);
        for t in 3..5 {
            let out = stack_step(&store, "s", &c, &x.data()[t * 6..(t + 1) * 6], &mut cache);
            for (a, b) in out.iter().zip(&full.data()[t * 6..(t + 1) * 6]) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }
}
