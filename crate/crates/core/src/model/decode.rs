//! Value-only autoregressive decoding with per-block key/value caches.
//!
//! Generation needs no gradients, so it runs outside the tape: each emitted
//! token costs one decoder row instead of a full prefix re-encode. The row
//! arithmetic mirrors the tape forward, so teacher-forced scoring of a
//! generated sequence reproduces these logits to floating-point noise.

use super::net::ModelConfig;
use super::params::ParamStore;
use super::tape::{gelu, masked_log_softmax, masked_softmax, LN_EPS};
use crate::expr::vocab::{EOS, SOS};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How the next token is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecodeMode {
    /// Highest-probability token, ties to the lowest id.
    Greedy,
    /// Inverse-CDF draw from the softmax of logits divided by `temperature`.
    Sample { temperature: f64 },
    /// Width-limited search ranking completions by mean log-probability.
    Beam { width: usize },
}

/// One decoded sequence with its per-token log-probabilities under the
/// untempered policy. `completed` means an end token arrived within the
/// length cap; incomplete sequences never parse.
#[derive(Debug, Clone)]
pub struct Generated {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub completed: bool,
}

/// Incremental decoder: consumes one token at a time, returning the logits
/// row for the next position. Cloning forks the cache, which beam search
/// uses to branch hypotheses.
#[derive(Clone)]
pub struct IncrementalDecoder<'a> {
    store: &'a ParamStore,
    config: &'a ModelConfig,
    cross_k: Vec<Array2<f64>>,
    cross_v: Vec<Array2<f64>>,
    self_k: Vec<Vec<Array1<f64>>>,
    self_v: Vec<Vec<Array1<f64>>>,
    len: usize,
}

impl<'a> IncrementalDecoder<'a> {
    pub fn new(store: &'a ParamStore, config: &'a ModelConfig, memory: &Array2<f64>) -> Self {
        debug_assert_eq!(memory.dim(), (config.memory_slots, config.width));
        let blocks = config.decoder_blocks;
        let mut cross_k = Vec::with_capacity(blocks);
        let mut cross_v = Vec::with_capacity(blocks);
        for i in 0..blocks {
            cross_k.push(linear_mat(store, memory, &format!("dec{i}.cross.wk"), &format!("dec{i}.cross.bk")));
            cross_v.push(linear_mat(store, memory, &format!("dec{i}.cross.wv"), &format!("dec{i}.cross.bv")));
        }
        IncrementalDecoder {
            store,
            config,
            cross_k,
            cross_v,
            self_k: vec![Vec::new(); blocks],
            self_v: vec![Vec::new(); blocks],
            len: 0,
        }
    }

    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds `token` at the next position and returns the logits row scoring
    /// its successor. Panics if the position table is exhausted.
    pub fn step(&mut self, token: u32) -> Array1<f64> {
        let c = self.config;
        assert!(self.len < c.max_seq_len, "position table exhausted");
        let tok = self.store.by_name("dec.tok").row(token as usize);
        let pos = self.store.by_name("dec.pos").row(self.len);
        let mut x = &tok + &pos;
        for i in 0..c.decoder_blocks {
            let h = self.ln_row(&x, &format!("dec{i}.ln1"));
            let name = format!("dec{i}.self");
            let k = self.linear_row(&h, &format!("{name}.wk"), &format!("{name}.bk"));
            let v = self.linear_row(&h, &format!("{name}.wv"), &format!("{name}.bv"));
            self.self_k[i].push(k);
            self.self_v[i].push(v);
            let q = self.linear_row(&h, &format!("{name}.wq"), &format!("{name}.bq"));
            let ctx = attend_rows(c, &q, &self.self_k[i], &self.self_v[i]);
            let a = self.linear_row(&ctx, &format!("{name}.wo"), &format!("{name}.bo"));
            x += &a;

            let h = self.ln_row(&x, &format!("dec{i}.ln2"));
            let name = format!("dec{i}.cross");
            let q = self.linear_row(&h, &format!("{name}.wq"), &format!("{name}.bq"));
            let ctx = attend_mat(c, &q, &self.cross_k[i], &self.cross_v[i]);
            let a = self.linear_row(&ctx, &format!("{name}.wo"), &format!("{name}.bo"));
            x += &a;

            let h = self.ln_row(&x, &format!("dec{i}.ln3"));
            let name = format!("dec{i}.mlp");
            let m = self.linear_row(&h, &format!("{name}.w1"), &format!("{name}.b1"));
            let m = m.mapv(gelu);
            let m = self.linear_row(&m, &format!("{name}.w2"), &format!("{name}.b2"));
            x += &m;
        }
        let x = self.ln_row(&x, "dec.ln");
        self.len += 1;
        self.linear_row(&x, "out.w", "out.b")
    }

    fn linear_row(&self, x: &Array1<f64>, w: &str, b: &str) -> Array1<f64> {
        let out = x.dot(self.store.by_name(w));
        out + &self.store.by_name(b).row(0)
    }

    fn ln_row(&self, x: &Array1<f64>, name: &str) -> Array1<f64> {
        let g = self.store.by_name(&format!("{name}.g")).row(0);
        let b = self.store.by_name(&format!("{name}.b")).row(0);
        let m = x.len() as f64;
        let mean = x.sum() / m;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        Array1::from_shape_fn(x.len(), |j| g[j] * ((x[j] - mean) * inv) + b[j])
    }
}

fn linear_mat(store: &ParamStore, x: &Array2<f64>, w: &str, b: &str) -> Array2<f64> {
    let mut out = x.dot(store.by_name(w));
    out += &store.by_name(b).row(0);
    out
}

/// Single-query attention over cached key/value rows.
fn attend_rows(
    c: &ModelConfig,
    q: &Array1<f64>,
    keys: &[Array1<f64>],
    values: &[Array1<f64>],
) -> Array1<f64> {
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array1::zeros(c.width);
    for h in 0..c.heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![cols.clone()]);
        let mut scores: Vec<f64> = keys
            .iter()
            .map(|k| qh.dot(&k.slice(ndarray::s![cols.clone()])) * scale)
            .collect();
        softmax_in_place(&mut scores);
        for (p, v) in scores.iter().zip(values) {
            let vh = v.slice(ndarray::s![cols.clone()]);
            ctx.slice_mut(ndarray::s![cols.clone()])
                .zip_mut_with(&vh, |c, &v| *c += p * v);
        }
    }
    ctx
}

/// Single-query attention over a fixed key/value matrix (cross-attention).
fn attend_mat(c: &ModelConfig, q: &Array1<f64>, keys: &Array2<f64>, values: &Array2<f64>) -> Array1<f64> {
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array1::zeros(c.width);
    for h in 0..c.heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![cols.clone()]);
        let mut scores: Vec<f64> = (0..keys.nrows())
            .map(|j| qh.dot(&keys.slice(ndarray::s![j, cols.clone()])) * scale)
            .collect();
        softmax_in_place(&mut scores);
        for (j, p) in scores.iter().enumerate() {
            let vh = values.slice(ndarray::s![j, cols.clone()]);
            ctx.slice_mut(ndarray::s![cols.clone()])
                .zip_mut_with(&vh, |c, &v| *c += p * v);
        }
    }
    ctx
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Highest unmasked logit, ties broken toward the lowest token id.
pub(crate) fn choose_greedy(row: ArrayView1<f64>, masked: &[usize]) -> u32 {
    let mut best = None;
    for (j, &v) in row.iter().enumerate() {
        if masked.contains(&j) {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((j, v)),
        }
    }
    best.expect("some token is unmasked").0 as u32
}

/// Inverse-CDF draw from the tempered distribution. `p` must be the
/// untempered masked softmax of `row`, reused directly when temperature
/// is exactly 1.
pub(crate) fn choose_sample(
    row: &Array1<f64>,
    p: &Array1<f64>,
    temperature: f64,
    masked: &[usize],
    rng: &mut impl Rng,
) -> u32 {
    assert!(temperature > 0.0, "temperature must be positive");
    let tempered;
    let p = if temperature == 1.0 {
        p
    } else {
        tempered = masked_softmax(row.mapv(|v| v / temperature).view(), masked);
        &tempered
    };
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut chosen = None;
    for (j, &pj) in p.iter().enumerate() {
        if masked.contains(&j) {
            continue;
        }
        cum += pj;
        if cum > u {
            return j as u32;
        }
        chosen = Some(j as u32);
    }
    chosen.expect("some token is unmasked")
}

/// Greedy decoding: untempered argmax each step, ties to the lowest id.
pub fn greedy(store: &ParamStore, config: &ModelConfig, memory: &Array2<f64>) -> Generated {
    decode_loop(store, config, memory, |row, _, _| {
        choose_greedy(row.view(), &config.masked_ids())
    })
}

/// Ancestral sampling at the given temperature; log-probabilities are still
/// reported under the untempered policy.
pub fn sample(
    store: &ParamStore,
    config: &ModelConfig,
    memory: &Array2<f64>,
    temperature: f64,
    rng: &mut impl Rng,
) -> Generated {
    let masked = config.masked_ids();
    decode_loop(store, config, memory, |row, p, _| {
        choose_sample(row, p, temperature, &masked, rng)
    })
}

/// Shared generation loop. The chooser sees the raw logits row plus the
/// untempered masked softmax and its log; the recorded log-probability is
/// always the untempered one.
fn decode_loop(
    store: &ParamStore,
    config: &ModelConfig,
    memory: &Array2<f64>,
    mut choose: impl FnMut(&Array1<f64>, &Array1<f64>, &Array1<f64>) -> u32,
) -> Generated {
    let masked = config.masked_ids();
    let mut state = IncrementalDecoder::new(store, config, memory);
    let mut tokens = vec![SOS];
    let mut logprobs = Vec::new();
    let mut completed = false;
    while tokens.len() < config.max_seq_len {
        let row = state.step(*tokens.last().expect("non-empty"));
        let (p, lnp) = masked_log_softmax(row.view(), &masked);
        let next = choose(&row, &p, &lnp);
        logprobs.push(lnp[next as usize]);
        tokens.push(next);
        if next == EOS {
            completed = true;
            break;
        }
    }
    Generated {
        tokens,
        logprobs,
        completed,
    }
}

struct Hypothesis<'a> {
    state: IncrementalDecoder<'a>,
    tokens: Vec<u32>,
    logprobs: Vec<f64>,
    sum: f64,
}

/// Beam search with the given width. Returns up to `width` candidates:
/// completed hypotheses ranked by mean token log-probability, then any
/// length-capped remainders needed to fill the list.
pub fn beam(
    store: &ParamStore,
    config: &ModelConfig,
    memory: &Array2<f64>,
    width: usize,
) -> Vec<Generated> {
    assert!(width > 0, "beam width must be positive");
    let masked = config.masked_ids();
    let mut active = vec![Hypothesis {
        state: IncrementalDecoder::new(store, config, memory),
        tokens: vec![SOS],
        logprobs: Vec::new(),
        sum: 0.0,
    }];
    let mut done: Vec<Generated> = Vec::new();
    let mut capped: Vec<Generated> = Vec::new();
    while !active.is_empty() && done.len() < width {
        // (cumulative logprob, source hypothesis, token, token logprob)
        let mut candidates: Vec<(f64, usize, u32, f64)> = Vec::new();
        let rows: Vec<Array1<f64>> = active
            .iter_mut()
            .map(|h| {
                let last = *h.tokens.last().expect("non-empty");
                h.state.step(last)
            })
            .collect();
        for (bi, (h, row)) in active.iter().zip(&rows).enumerate() {
            let (_, lnp) = masked_log_softmax(row.view(), &masked);
            for (j, &l) in lnp.iter().enumerate() {
                if masked.contains(&j) {
                    continue;
                }
                candidates.push((h.sum + l, bi, j as u32, l));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (sum, bi, token, l) in candidates {
            let src = &active[bi];
            let mut tokens = src.tokens.clone();
            tokens.push(token);
            let mut logprobs = src.logprobs.clone();
            logprobs.push(l);
            if token == EOS {
                done.push(Generated {
                    tokens,
                    logprobs,
                    completed: true,
                });
            } else if tokens.len() >= config.max_seq_len {
                capped.push(Generated {
                    tokens,
                    logprobs,
                    completed: false,
                });
            } else {
                next.push(Hypothesis {
                    state: active[bi].state.clone(),
                    tokens,
                    logprobs,
                    sum,
                });
            }
        }
        active = next;
    }
    done.sort_by(|a, b| mean_lp(b).total_cmp(&mean_lp(a)));
    done.extend(capped);
    done.truncate(width);
    done
}

fn mean_lp(g: &Generated) -> f64 {
    g.logprobs.iter().sum::<f64>() / g.logprobs.len() as f64
}
