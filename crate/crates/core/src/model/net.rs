//! The encoder-decoder network: input featurization, parameter layout and
//! initialization, and the tape-recorded forward passes.
//!
//! The encoder is a set transformer over data points: per-point features go
//! through a linear embedding and pre-norm self-attention blocks, are mean
//! pooled (giving permutation invariance over rows), and projected into a
//! fixed number of memory slots. The decoder is a pre-norm causal transformer
//! over token embeddings with learned positions, cross-attending to the
//! memory slots, followed by a zero-initialized output projection so the
//! initial policy is uniform over unmasked tokens.

use super::params::ParamStore;
use super::tape::{NodeId, Tape};
use crate::expr::vocab::{MAX_DIM, PAD, SOS, T_MAX, VOCAB_SIZE};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Per-value features: sign, normalized mantissa, scaled exponent.
const VALUE_FEATURES: usize = 3;
/// Feature width of one data point: ten predictor slots and the target, three
/// features each, plus ten presence flags marking which predictors exist.
pub const POINT_FEATURES: usize = VALUE_FEATURES * (MAX_DIM + 1) + MAX_DIM;

const MLP_RATIO: usize = 4;
const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters, recorded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Number of fixed-width memory slots the decoder cross-attends to.
    pub memory_slots: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            memory_slots: 4,
            vocab_size: VOCAB_SIZE,
            max_seq_len: T_MAX,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err("block counts must be positive".into());
        }
        if self.memory_slots == 0 {
            return Err("memory_slots must be positive".into());
        }
        if self.vocab_size <= (SOS.max(PAD) as usize + 2) {
            return Err(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.max_seq_len < 2 || self.max_seq_len > T_MAX {
            return Err(format!("max_seq_len {} not in 2..={}", self.max_seq_len, T_MAX));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Token ids excluded from every output distribution.
    pub fn masked_ids(&self) -> [usize; 2] {
        [PAD as usize, SOS as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum InitKind {
    Normal,
    Zeros,
    Ones,
}

/// The fixed parameter manifest: (name, rows, cols, initialization), in
/// storage order. Checkpoints record and verify this same layout.
pub(crate) fn manifest(config: &ModelConfig) -> Vec<(String, usize, usize, InitKind)> {
    use InitKind::{Normal, Ones, Zeros};
    let w = config.width;
    let hidden = MLP_RATIO * w;
    let mut out: Vec<(String, usize, usize, InitKind)> = Vec::new();
    let layer_norm = |out: &mut Vec<_>, name: &str| {
        out.push((format!("{name}.g"), 1, w, Ones));
        out.push((format!("{name}.b"), 1, w, Zeros));
    };
    let attention = |out: &mut Vec<_>, name: &str| {
        for proj in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{name}.{proj}"), w, w, Normal));
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            out.push((format!("{name}.{bias}"), 1, w, Zeros));
        }
    };
    let mlp = |out: &mut Vec<_>, name: &str| {
        out.push((format!("{name}.w1"), w, hidden, Normal));
        out.push((format!("{name}.b1"), 1, hidden, Zeros));
        out.push((format!("{name}.w2"), hidden, w, Normal));
        out.push((format!("{name}.b2"), 1, w, Zeros));
    };

    out.push(("feat.w".into(), POINT_FEATURES, w, Normal));
    out.push(("feat.b".into(), 1, w, Zeros));
    for i in 0..config.encoder_blocks {
        layer_norm(&mut out, &format!("enc{i}.ln1"));
        attention(&mut out, &format!("enc{i}.attn"));
        layer_norm(&mut out, &format!("enc{i}.ln2"));
        mlp(&mut out, &format!("enc{i}.mlp"));
    }
    layer_norm(&mut out, "enc.ln");
    out.push(("mem.w".into(), w, config.memory_slots * w, Normal));
    out.push(("mem.b".into(), 1, config.memory_slots * w, Zeros));

    out.push(("dec.tok".into(), config.vocab_size, w, Normal));
    out.push(("dec.pos".into(), config.max_seq_len, w, Normal));
    for i in 0..config.decoder_blocks {
        layer_norm(&mut out, &format!("dec{i}.ln1"));
        attention(&mut out, &format!("dec{i}.self"));
        layer_norm(&mut out, &format!("dec{i}.ln2"));
        attention(&mut out, &format!("dec{i}.cross"));
        layer_norm(&mut out, &format!("dec{i}.ln3"));
        mlp(&mut out, &format!("dec{i}.mlp"));
    }
    layer_norm(&mut out, "dec.ln");
    // Zero output projection: the first distribution is uniform over
    // unmasked tokens regardless of the rest of the initialization.
    out.push(("out.w".into(), w, config.vocab_size, Zeros));
    out.push(("out.b".into(), 1, config.vocab_size, Zeros));
    out
}

/// Builds the parameter store in manifest order.
pub fn init_params(config: &ModelConfig, rng: &mut impl Rng) -> ParamStore {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut store = ParamStore::new();
    for (name, rows, cols, kind) in manifest(config) {
        let v = match kind {
            InitKind::Normal => {
                Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
            }
            InitKind::Zeros => Array2::zeros((rows, cols)),
            InitKind::Ones => Array2::from_elem((rows, cols), 1.0),
        };
        store.add(&name, v);
    }
    store
}

fn value_features(v: f64) -> [f64; VALUE_FEATURES] {
    if v == 0.0 {
        return [0.0; VALUE_FEATURES];
    }
    let a = v.abs();
    let mut e = a.log10().floor() as i32 + 1;
    while ten(e - 1) > a {
        e -= 1;
    }
    while ten(e) <= a {
        e += 1;
    }
    // Magnitudes beyond the target cap saturate; the exponent feature is kept
    // within a unit-scale range.
    let e = e.clamp(-10, 12);
    let m = (a / ten(e)).min(1.0);
    [v.signum(), m, e as f64 / 10.0]
}

fn ten(e: i32) -> f64 {
    10f64.powi(e)
}

/// Maps a data table to per-point feature rows, shape [n, POINT_FEATURES].
pub fn featurize(x: ArrayView2<f64>, y: ArrayView1<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    debug_assert!(d <= MAX_DIM);
    debug_assert_eq!(y.len(), n);
    let mut out = Array2::zeros((n, POINT_FEATURES));
    for i in 0..n {
        for j in 0..d {
            let f = value_features(x[[i, j]]);
            for (k, v) in f.iter().enumerate() {
                out[[i, j * VALUE_FEATURES + k]] = *v;
            }
        }
        let f = value_features(y[i]);
        for (k, v) in f.iter().enumerate() {
            out[[i, MAX_DIM * VALUE_FEATURES + k]] = *v;
        }
        for j in 0..d {
            out[[i, (MAX_DIM + 1) * VALUE_FEATURES + j]] = 1.0;
        }
    }
    out
}

/// Linear layer y = x·W + b with parameters looked up by name.
fn linear(t: &mut Tape, x: NodeId, w_name: &str, b_name: &str) -> NodeId {
    let w = t.store().id(w_name);
    let b = t.store().id(b_name);
    let w = t.param(w);
    let b = t.param(b);
    let xw = t.matmul(x, w);
    t.add_row(xw, b)
}

fn layer_norm(t: &mut Tape, x: NodeId, name: &str) -> NodeId {
    let g = t.store().id(&format!("{name}.g"));
    let b = t.store().id(&format!("{name}.b"));
    let g = t.param(g);
    let b = t.param(b);
    t.layer_norm(x, g, b)
}

/// Multi-head attention of `queries` over `keys_values`, both post-norm
/// inputs of width `config.width`.
fn attention(
    t: &mut Tape,
    config: &ModelConfig,
    name: &str,
    queries: NodeId,
    keys_values: NodeId,
    causal: bool,
) -> NodeId {
    let q = linear(t, queries, &format!("{name}.wq"), &format!("{name}.bq"));
    let k = linear(t, keys_values, &format!("{name}.wk"), &format!("{name}.bk"));
    let v = linear(t, keys_values, &format!("{name}.wv"), &format!("{name}.bv"));
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = t.slice_cols(q, h * dh, dh);
        let kh = t.slice_cols(k, h * dh, dh);
        let vh = t.slice_cols(v, h * dh, dh);
        let scores = t.matmul_nt(qh, kh);
        let scaled = t.scale(scores, scale);
        let probs = t.softmax_rows(scaled, causal);
        heads.push(t.matmul(probs, vh));
    }
    let ctx = t.concat_cols(&heads);
    linear(t, ctx, &format!("{name}.wo"), &format!("{name}.bo"))
}

fn mlp(t: &mut Tape, x: NodeId, name: &str) -> NodeId {
    let h = linear(t, x, &format!("{name}.w1"), &format!("{name}.b1"));
    let h = t.gelu(h);
    linear(t, h, &format!("{name}.w2"), &format!("{name}.b2"))
}

/// Encoder forward: features to a [memory_slots, width] memory.
pub fn encode_tape(t: &mut Tape, config: &ModelConfig, features: Array2<f64>) -> NodeId {
    let mut x = {
        let f = t.constant(features);
        linear(t, f, "feat.w", "feat.b")
    };
    for i in 0..config.encoder_blocks {
        let h = layer_norm(t, x, &format!("enc{i}.ln1"));
        let a = attention(t, config, &format!("enc{i}.attn"), h, h, false);
        x = t.add(x, a);
        let h = layer_norm(t, x, &format!("enc{i}.ln2"));
        let m = mlp(t, h, &format!("enc{i}.mlp"));
        x = t.add(x, m);
    }
    let x = layer_norm(t, x, "enc.ln");
    let pooled = t.mean_rows(x);
    let mem = linear(t, pooled, "mem.w", "mem.b");
    t.reshape(mem, config.memory_slots, config.width)
}

/// Decoder forward over an input prefix, returning logits of shape
/// [input length, vocab_size]. Row `i` scores the token following
/// `input_tokens[..=i]`.
pub fn decoder_logits_tape(
    t: &mut Tape,
    config: &ModelConfig,
    memory: NodeId,
    input_tokens: &[u32],
) -> NodeId {
    debug_assert!(!input_tokens.is_empty());
    debug_assert!(input_tokens.len() <= config.max_seq_len);
    let ids: Vec<usize> = input_tokens.iter().map(|&id| id as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok_table = t.store().id("dec.tok");
    let pos_table = t.store().id("dec.pos");
    let tok_table = t.param(tok_table);
    let pos_table = t.param(pos_table);
    let tok = t.gather_rows(tok_table, &ids);
    let pos = t.gather_rows(pos_table, &positions);
    let mut x = t.add(tok, pos);
    for i in 0..config.decoder_blocks {
        let h = layer_norm(t, x, &format!("dec{i}.ln1"));
        let a = attention(t, config, &format!("dec{i}.self"), h, h, true);
        x = t.add(x, a);
        let h = layer_norm(t, x, &format!("dec{i}.ln2"));
        let a = attention(t, config, &format!("dec{i}.cross"), h, memory, false);
        x = t.add(x, a);
        let h = layer_norm(t, x, &format!("dec{i}.ln3"));
        let m = mlp(t, h, &format!("dec{i}.mlp"));
        x = t.add(x, m);
    }
    let x = layer_norm(t, x, "dec.ln");
    linear(t, x, "out.w", "out.b")
}
