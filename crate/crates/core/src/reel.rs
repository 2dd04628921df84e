//! Reinforcement finetuning: trajectory subsets, rollouts, the smoothed R²
//! reward, the clipped importance-weighted surrogate with a KL stability
//! term, and the two-loop driver that adapts a pretrained policy to one
//! dataset.
//!
//! Rollouts are sampled from the current policy π_θ, so exploration tracks
//! the model being trained; the frozen reference policy re-scores each
//! sequence to supply the importance-ratio denominator and the KL anchor.

use crate::expr::token::parse_ids;
use crate::expr::vocab::MAX_DIM;
use crate::expr::{evaluate, EvalResult, Vocabulary};
use crate::model::net::{decoder_logits_tape, encode_tape, featurize};
use crate::model::optim::{AdamW, GradAccumulator};
use crate::model::tape::{NodeId, Tape};
use crate::model::{LatentEmbedding, ModelError, PolicySnapshot};
use crate::rng::stream_indexed;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest value the smoothed reward can return; the transform maps into the
/// open interval (−1, 1) even where the sigmoid saturates.
const REWARD_SAT: f64 = 1.0 - f64::EPSILON / 2.0;

/// Finetuning hyperparameters. Defaults follow the reference recipe: 128
/// bags of 200 points, 10 epochs of batch-64 updates, clip 0.2, KL
/// coefficient 0.2, learning rate 5e−5, temperature-1 sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub n_subsets: usize,
    pub subset_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip: f64,
    pub kl_coefficient: f64,
    pub learning_rate: f64,
    pub decode_mode: RolloutDecode,
    pub temperature: f64,
    /// 0 keeps the reference policy frozen at the pretrained snapshot for
    /// the whole run; k > 0 refreshes it to the current policy every k
    /// epochs.
    pub refresh_old_every: usize,
    /// Beam width when `decode_mode` is `beam`.
    pub beam_width: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutDecode {
    Sample,
    Beam,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            n_subsets: 128,
            subset_size: 200,
            epochs: 10,
            batch_size: 64,
            clip: 0.2,
            kl_coefficient: 0.2,
            learning_rate: 5e-5,
            decode_mode: RolloutDecode::Sample,
            temperature: 1.0,
            refresh_old_every: 0,
            beam_width: 4,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), ReelError> {
        let fail = |m: String| Err(ReelError::InvalidConfig(m));
        if self.n_subsets == 0 {
            return fail("n_subsets must be positive".into());
        }
        if self.subset_size == 0 || self.subset_size > crate::model::MAX_INPUT_POINTS {
            return fail(format!(
                "subset_size {} not in 1..={}",
                self.subset_size,
                crate::model::MAX_INPUT_POINTS
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return fail(format!("clip {} not in (0,1)", self.clip));
        }
        if !(self.kl_coefficient >= 0.0 && self.kl_coefficient.is_finite()) {
            return fail(format!("kl_coefficient {} negative", self.kl_coefficient));
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate {} not positive", self.learning_rate));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature {} not positive", self.temperature));
        }
        if self.beam_width == 0 {
            return fail("beam_width must be positive".into());
        }
        Ok(())
    }

    /// Gradient-update steps per epoch: the N subsets consumed round-robin
    /// in batches.
    pub fn steps_per_epoch(&self) -> usize {
        self.n_subsets.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Error)]
pub enum ReelError {
    #[error("invalid finetune config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has {0} input dimensions, limit {MAX_DIM}")]
    TooManyDims(usize),
    #[error("log-probability sequences differ in length: {new} new vs {old} old")]
    LengthMismatch { new: usize, old: usize },
    #[error("empty log-probability sequence")]
    EmptySequence,
    #[error("distribution at step {step} sums to {sum:.12}, not 1")]
    NotNormalized { step: usize, sum: f64 },
    #[error("distribution shapes differ: {new:?} new vs {old:?} old")]
    ShapeMismatch {
        new: (usize, usize),
        old: (usize, usize),
    },
    #[error("non-finite loss at step {step}; offending rollout: {rollout}")]
    NonFiniteLoss { step: u64, rollout: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One with-replacement bag of dataset rows used to condition rollouts.
#[derive(Debug, Clone)]
pub struct TrajectorySubset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub source_rows: Vec<usize>,
}

/// Draws `config.n_subsets` bags of `config.subset_size` rows, uniformly
/// with replacement, deterministically from the config seed.
pub fn sample_subsets(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    config: &FinetuneConfig,
) -> Result<Vec<TrajectorySubset>, ReelError> {
    config.validate()?;
    let (n, d) = x.dim();
    if n == 0 || y.is_empty() {
        return Err(ReelError::EmptyDataset);
    }
    if d > MAX_DIM {
        return Err(ReelError::TooManyDims(d));
    }
    assert_eq!(y.len(), n, "row count mismatch between inputs and targets");
    let mut rng = stream_indexed(config.seed, "reel/subsets", 0);
    let mut subsets = Vec::with_capacity(config.n_subsets);
    for _ in 0..config.n_subsets {
        let rows: Vec<usize> = (0..config.subset_size)
            .map(|_| rng.gen_range(0..n))
            .collect();
        let mut sx = Array2::zeros((config.subset_size, d));
        let mut sy = Array1::zeros(config.subset_size);
        for (out, &src) in rows.iter().enumerate() {
            sx.row_mut(out).assign(&x.row(src));
            sy[out] = y[src];
        }
        subsets.push(TrajectorySubset {
            x: sx,
            y: sy,
            source_rows: rows,
        });
    }
    Ok(subsets)
}

/// Coefficient of determination of a candidate's predictions, or −1 when the
/// candidate failed to evaluate. Zero-variance targets count as a perfect
/// fit only when the predictions match within 1e−9; otherwise −1, keeping
/// the valid/invalid dichotomy.
pub fn compute_r2(y: ArrayView1<f64>, y_pred: &EvalResult) -> f64 {
    if !y_pred.valid {
        return -1.0;
    }
    let pred = &y_pred.values;
    assert_eq!(pred.len(), y.len(), "prediction length mismatch");
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        let max_err = y
            .iter()
            .zip(pred.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        return if max_err <= 1e-9 { 1.0 } else { -1.0 };
    }
    let ss_res: f64 = y
        .iter()
        .zip(pred.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    1.0 - ss_res / ss_tot
}

/// Smoothed reward r = 2/(1 + e^(−R²)) − 1: strictly increasing, odd, and
/// contained in the open interval (−1, 1) even where the sigmoid saturates.
pub fn smooth_reward(r2: f64) -> f64 {
    let s = 2.0 / (1.0 + (-r2).exp()) - 1.0;
    s.clamp(-REWARD_SAT, REWARD_SAT)
}

/// Importance ratio ρ = exp(mean(new − old)): the geometric mean of the
/// per-token probability ratios between the finetuned and reference
/// policies.
pub fn importance_ratio(new_logprobs: &[f64], old_logprobs: &[f64]) -> Result<f64, ReelError> {
    if new_logprobs.len() != old_logprobs.len() {
        return Err(ReelError::LengthMismatch {
            new: new_logprobs.len(),
            old: old_logprobs.len(),
        });
    }
    if new_logprobs.is_empty() {
        return Err(ReelError::EmptySequence);
    }
    let t = new_logprobs.len() as f64;
    let sum: f64 = new_logprobs
        .iter()
        .zip(old_logprobs)
        .map(|(n, o)| n - o)
        .sum();
    Ok((sum / t).exp())
}

/// Clipped surrogate L = −min(ρ·r, clip(ρ, 1−ε, 1+ε)·r), bounding how much
/// one rollout's reward can reweigh the update.
pub fn clipped_loss(ratio: f64, reward: f64, clip: f64) -> f64 {
    debug_assert!(ratio > 0.0 && clip > 0.0 && clip < 1.0);
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    -f64::min(ratio * reward, clipped * reward)
}

/// Mean over steps of KL(old ‖ new) with the full-vocabulary sum. Rows are
/// per-step distributions; both matrices must be row-normalized.
pub fn kl_loss(old: ArrayView2<f64>, new: ArrayView2<f64>) -> Result<f64, ReelError> {
    if old.dim() != new.dim() {
        return Err(ReelError::ShapeMismatch {
            new: new.dim(),
            old: old.dim(),
        });
    }
    let (t, _) = old.dim();
    if t == 0 {
        return Err(ReelError::EmptySequence);
    }
    for (step, row) in old.rows().into_iter().chain(new.rows()).enumerate() {
        let sum = row.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ReelError::NotNormalized {
                step: step % t,
                sum,
            });
        }
    }
    let mut total = 0.0;
    for (po_row, pn_row) in old.rows().into_iter().zip(new.rows()) {
        for (&po, &pn) in po_row.iter().zip(pn_row) {
            if po > 0.0 {
                total += po * (po.ln() - pn.ln());
            }
        }
    }
    Ok(total / t as f64)
}

/// Everything known about one rollout after generation and scoring.
#[derive(Debug, Clone, Serialize)]
pub struct Rollout {
    pub subset_index: usize,
    pub tokens: Vec<u32>,
    pub valid: bool,
    pub r2: f64,
    pub reward: f64,
    pub ratio: f64,
    pub kl: f64,
    pub new_logprobs: Vec<f64>,
    pub old_logprobs: Vec<f64>,
}

/// Per-step training diagnostics, one JSON line each in the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_r2: f64,
    pub mean_rho: f64,
    pub kl: f64,
    pub valid_rate: f64,
    pub loss: f64,
}

/// Reference-policy view of one rollout: per-token log-probabilities of the
/// generated sequence and the full per-step distributions needed by the
/// ratio denominator and the KL term.
struct ReferenceScores {
    old_logprobs: Vec<f64>,
    p_old: Array2<f64>,
    ln_p_old: Array2<f64>,
}

/// Samples one token sequence from the current policy, conditioned on its
/// own encoding of the subset.
fn sample_rollout(
    theta: &PolicySnapshot,
    embedding: &LatentEmbedding,
    config: &FinetuneConfig,
    rng: &mut impl Rng,
) -> Vec<u32> {
    match config.decode_mode {
        RolloutDecode::Sample => crate::model::decode::sample(
            theta.params(),
            theta.config(),
            &embedding.memory,
            config.temperature,
            rng,
        )
        .tokens,
        RolloutDecode::Beam => crate::model::decode::beam(
            theta.params(),
            theta.config(),
            &embedding.memory,
            config.beam_width,
        )
        .into_iter()
        .next()
        .expect("beam width is positive")
        .tokens,
    }
}

/// Teacher-forced scoring of a generated sequence under the frozen
/// reference policy: one forward pass over the rollout prefixes.
fn score_reference(
    old: &PolicySnapshot,
    embedding: &LatentEmbedding,
    tokens: &[u32],
) -> ReferenceScores {
    let mut t = Tape::new(old.params());
    let mem = t.constant(embedding.memory.clone());
    let input = &tokens[..tokens.len() - 1];
    let logits = decoder_logits_tape(&mut t, old.config(), mem, input);
    let rows = t.value(logits);
    let masked = old.config().masked_ids();
    let v = old.config().vocab_size;
    let mut p_old = Array2::zeros((input.len(), v));
    let mut ln_p_old = Array2::zeros((input.len(), v));
    let mut old_logprobs = Vec::with_capacity(input.len());
    for (i, row) in rows.rows().into_iter().enumerate() {
        let (p, lnp) = crate::model::tape::masked_log_softmax(row, &masked);
        old_logprobs.push(lnp[tokens[i + 1] as usize]);
        p_old.row_mut(i).assign(&p);
        ln_p_old.row_mut(i).assign(&lnp);
    }
    ReferenceScores {
        old_logprobs,
        p_old,
        ln_p_old,
    }
}

/// Parses and evaluates a rollout on its conditioning subset, yielding the
/// validity flag and R².
fn rollout_r2(tokens: &[u32], subset: &TrajectorySubset, vocab: &Vocabulary) -> (bool, f64) {
    match parse_ids(tokens, vocab) {
        Ok(expr) => {
            let result = evaluate(&expr, subset.x.view());
            let r2 = compute_r2(subset.y.view(), &result);
            (result.valid, r2)
        }
        Err(_) => (false, -1.0),
    }
}

/// Tape nodes of one rollout's objective.
pub struct RolloutLoss {
    /// −min(ρ·r, clip(ρ)·r) + β·KL, a [1, 1] node.
    pub loss: NodeId,
    /// New-policy log-probability of each generated token, [T, 1].
    pub logprobs: NodeId,
    /// The KL term before weighting; absent when β = 0.
    pub kl: Option<NodeId>,
}

/// Builds the differentiable per-rollout objective
/// −min(ρ·r, clip(ρ)·r) + β·KL(old ‖ θ) on the tape.
pub fn rollout_loss_tape(
    tape: &mut Tape,
    theta: &PolicySnapshot,
    subset: &TrajectorySubset,
    tokens: &[u32],
    reference: RolloutReference<'_>,
    reward: f64,
    config: &FinetuneConfig,
) -> RolloutLoss {
    let model_config = theta.config();
    let masked = model_config.masked_ids();
    let feats = featurize(subset.x.view(), subset.y.view());
    let memory = encode_tape(tape, model_config, feats);
    let input = &tokens[..tokens.len() - 1];
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    let logits = decoder_logits_tape(tape, model_config, memory, input);
    let lnp = tape.gather_log_softmax(logits, &targets, &masked);

    let t = targets.len() as f64;
    let sum_new = tape.sum_all(lnp);
    let mean_new = tape.scale(sum_new, 1.0 / t);
    let old_mean: f64 = reference.old_logprobs.iter().sum::<f64>() / t;
    let old_node = tape.scalar(old_mean);
    let log_ratio = tape.sub(mean_new, old_node);
    let ratio = tape.exp(log_ratio);
    let clipped = tape.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip);
    let unclipped_term = tape.scale(ratio, reward);
    let clipped_term = tape.scale(clipped, reward);
    let surrogate = tape.min(unclipped_term, clipped_term);
    let mut loss = tape.neg(surrogate);
    let mut kl = None;
    if config.kl_coefficient > 0.0 {
        let kl_node = tape.kl_vs_const(
            logits,
            reference.p_old.clone(),
            reference.ln_p_old,
            &masked,
        );
        let weighted = tape.scale(kl_node, config.kl_coefficient);
        loss = tape.add(loss, weighted);
        kl = Some(kl_node);
    }
    RolloutLoss {
        loss,
        logprobs: lnp,
        kl,
    }
}

/// Borrowed reference-policy quantities for one rollout.
pub struct RolloutReference<'a> {
    pub old_logprobs: &'a [f64],
    pub p_old: &'a Array2<f64>,
    pub ln_p_old: &'a Array2<f64>,
}

/// One batch update: for each subset the current policy encodes it and
/// samples a rollout (encode → generate → parse → evaluate → reward), the
/// frozen reference policy scores the sequence against its own embedding
/// (the ratio denominator and the KL anchor), and the clipped+KL objective
/// averaged over the batch drives a single optimizer step on π_θ.
///
/// `batch` pairs each subset with the *reference* policy's embedding of it;
/// the current policy re-encodes per rollout since its encoder moves every
/// step. `step` numbers the update globally; it seeds the rollout
/// randomness and labels diagnostics. On a non-finite loss the step aborts
/// with the offending rollout serialized and parameters untouched.
pub fn finetune_step(
    theta: &mut PolicySnapshot,
    old: &PolicySnapshot,
    batch: &[(usize, &TrajectorySubset, &LatentEmbedding)],
    config: &FinetuneConfig,
    step: u64,
    optimizer: &mut AdamW,
) -> Result<(StepDiagnostics, Vec<Rollout>), ReelError> {
    assert!(!batch.is_empty(), "empty rollout batch");
    assert!(
        batch.len() <= config.batch_size,
        "batch of {} exceeds configured batch_size {}",
        batch.len(),
        config.batch_size
    );
    let b = batch.len() as f64;
    let mut acc = GradAccumulator::zeros(theta.params());
    let mut rollouts = Vec::with_capacity(batch.len());
    let mut total_loss = 0.0;
    let mut total_kl = 0.0;

    for (slot, &(subset_index, subset, embedding)) in batch.iter().enumerate() {
        let rollout_id = step * config.batch_size as u64 + slot as u64;
        let mut rng = stream_indexed(config.seed, "reel/rollout", rollout_id);
        let theta_embedding = theta.encode(subset.x.view(), subset.y.view())?;
        let tokens = sample_rollout(theta, &theta_embedding, config, &mut rng);
        let reference = score_reference(old, embedding, &tokens);
        let (valid, r2) = rollout_r2(&tokens, subset, theta.vocab());
        let reward = smooth_reward(r2);

        let mut tape = Tape::new(theta.params());
        let nodes = rollout_loss_tape(
            &mut tape,
            theta,
            subset,
            &tokens,
            RolloutReference {
                old_logprobs: &reference.old_logprobs,
                p_old: &reference.p_old,
                ln_p_old: &reference.ln_p_old,
            },
            reward,
            config,
        );
        let new_logprobs = tape.value(nodes.logprobs).column(0).to_vec();
        let ratio = importance_ratio(&new_logprobs, &reference.old_logprobs)
            .expect("generation produced matching lengths");
        let loss_value = tape.scalar_value(nodes.loss);
        let kl_value = nodes.kl.map_or(0.0, |k| tape.scalar_value(k));

        let rollout = Rollout {
            subset_index,
            tokens: tokens.clone(),
            valid,
            r2,
            reward,
            ratio,
            kl: kl_value,
            new_logprobs,
            old_logprobs: reference.old_logprobs.clone(),
        };
        if !loss_value.is_finite() {
            return Err(ReelError::NonFiniteLoss {
                step,
                rollout: serde_json::to_string(&rollout).expect("rollout serializes"),
            });
        }
        let scaled = tape.scale(nodes.loss, 1.0 / b);
        acc.add_scaled(&tape.backward(scaled), 1.0);
        total_loss += loss_value / b;
        total_kl += kl_value / b;
        rollouts.push(rollout);
    }

    if !acc.all_finite() {
        return Err(ReelError::NonFiniteLoss {
            step,
            rollout: "non-finite gradient accumulated over the batch".into(),
        });
    }
    optimizer.step(theta.params_mut(), &acc);

    let mean = |f: &dyn Fn(&Rollout) -> f64| rollouts.iter().map(|r| f(r)).sum::<f64>() / b;
    Ok((
        StepDiagnostics {
            step,
            mean_reward: mean(&|r| r.reward),
            mean_r2: mean(&|r| r.r2),
            mean_rho: mean(&|r| r.ratio),
            kl: total_kl,
            valid_rate: mean(&|r| if r.valid { 1.0 } else { 0.0 }),
            loss: total_loss,
        },
        rollouts,
    ))
}

/// Outcome of a finetuning run: the last good policy, the full step log, and
/// the error that aborted the run early, if any.
pub struct ReelOutcome {
    pub snapshot: PolicySnapshot,
    pub log: Vec<StepDiagnostics>,
    pub error: Option<ReelError>,
}

/// The two-loop driver: freezes the pretrained policy as the reference,
/// samples N trajectory subsets once, then for each epoch consumes the
/// subsets round-robin in batches, performing one `finetune_step` per batch.
/// Reference embeddings are precomputed once per reference refresh; the
/// training policy re-encodes inside each step. Deterministic given
/// (snapshot, dataset, config.seed).
pub fn run_reel(
    pretrained: &PolicySnapshot,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    config: &FinetuneConfig,
) -> Result<ReelOutcome, ReelError> {
    config.validate()?;
    let subsets = sample_subsets(x, y, config)?;
    let mut theta = pretrained.clone_snapshot();
    let mut old = pretrained.clone_snapshot();
    let mut old_embeddings = encode_subsets(&old, &subsets)?;
    let mut optimizer = AdamW::new(theta.params(), config.learning_rate);
    let mut log = Vec::new();
    let mut cursor = 0usize;
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        if config.refresh_old_every > 0 && epoch > 0 && epoch % config.refresh_old_every == 0 {
            old = theta.clone_snapshot();
            match encode_subsets(&old, &subsets) {
                Ok(e) => old_embeddings = e,
                Err(e) => {
                    return Ok(ReelOutcome {
                        snapshot: theta,
                        log,
                        error: Some(e),
                    })
                }
            }
        }
        for _ in 0..config.steps_per_epoch() {
            let batch: Vec<(usize, &TrajectorySubset, &LatentEmbedding)> = (0..config.batch_size)
                .map(|i| {
                    let idx = (cursor + i) % subsets.len();
                    (idx, &subsets[idx], &old_embeddings[idx])
                })
                .collect();
            cursor = (cursor + config.batch_size) % subsets.len();
            match finetune_step(&mut theta, &old, &batch, config, step, &mut optimizer) {
                Ok((diag, _)) => log.push(diag),
                Err(e) => {
                    return Ok(ReelOutcome {
                        snapshot: theta,
                        log,
                        error: Some(e),
                    })
                }
            }
            step += 1;
        }
    }
    Ok(ReelOutcome {
        snapshot: theta,
        log,
        error: None,
    })
}

fn encode_subsets(
    policy: &PolicySnapshot,
    subsets: &[TrajectorySubset],
) -> Result<Vec<LatentEmbedding>, ReelError> {
    subsets
        .iter()
        .map(|s| policy.encode(s.x.view(), s.y.view()).map_err(ReelError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{EvalResult, FailureReason};
    use crate::model::ModelConfig;
    use crate::rng::stream;
    use ndarray::array;

    fn valid_pred(values: Vec<f64>) -> EvalResult {
        EvalResult {
            values: Array1::from_vec(values),
            valid: true,
            failure_reason: None,
        }
    }

    #[test]
    fn r2_matches_hand_computed_cases() {
        let y = array![1.0, 2.0, 3.0];
        assert_eq!(compute_r2(y.view(), &valid_pred(vec![1.0, 2.0, 3.0])), 1.0);
        assert_eq!(compute_r2(y.view(), &valid_pred(vec![2.0, 2.0, 2.0])), 0.0);
        let r2 = compute_r2(y.view(), &valid_pred(vec![3.0, 2.0, 1.0]));
        assert!((r2 - (-3.0)).abs() < 1e-12, "got {r2}");
        let invalid = EvalResult {
            values: Array1::zeros(3),
            valid: false,
            failure_reason: Some(FailureReason::DomainError),
        };
        assert_eq!(compute_r2(y.view(), &invalid), -1.0);
    }

    #[test]
    fn r2_zero_variance_rule() {
        let y = array![2.0, 2.0, 2.0];
        assert_eq!(compute_r2(y.view(), &valid_pred(vec![2.0, 2.0, 2.0])), 1.0);
        let off = valid_pred(vec![2.0, 2.0 + 5e-10, 2.0]);
        assert_eq!(compute_r2(y.view(), &off), 1.0);
        let wrong = valid_pred(vec![2.0, 2.1, 2.0]);
        assert_eq!(compute_r2(y.view(), &wrong), -1.0);
    }

    #[test]
    fn smooth_reward_shape() {
        assert_eq!(smooth_reward(0.0), 0.0);
        assert!((smooth_reward(1.0) - 0.462117).abs() < 1e-6);
        assert!((smooth_reward(-1.0) + 0.462117).abs() < 1e-6);
        for x in [-1e6, -701.0, -5.0, -0.3, 0.2, 4.0, 700.5, 1e6] {
            let s = smooth_reward(x);
            assert!(s > -1.0 && s < 1.0, "smooth({x}) = {s} left (−1,1)");
            assert!(
                (smooth_reward(x) + smooth_reward(-x)).abs() < 1e-12,
                "not odd at {x}"
            );
        }
        assert!(smooth_reward(0.2) > smooth_reward(0.1));
        assert!(smooth_reward(1e6) > 1.0 - 1e-9, "should saturate near 1");
    }

    #[test]
    fn importance_ratio_matches_geometric_mean() {
        assert_eq!(importance_ratio(&[0.5, -0.2], &[0.5, -0.2]).unwrap(), 1.0);
        let rho = importance_ratio(&[-1.0, -1.0], &[-1.2, -1.4]).unwrap();
        assert!((rho - 0.3f64.exp()).abs() < 1e-12);
        assert!((rho - 1.349859).abs() < 1e-6);
        // Doubling every per-token probability ratio multiplies ρ by 2.
        let base = importance_ratio(&[-0.4, -0.9, -2.0], &[-0.6, -1.0, -1.7]).unwrap();
        let ln2 = 2f64.ln();
        let doubled =
            importance_ratio(&[-0.4 + ln2, -0.9 + ln2, -2.0 + ln2], &[-0.6, -1.0, -1.7]).unwrap();
        assert!((doubled - 2.0 * base).abs() < 1e-12);
        assert!(matches!(
            importance_ratio(&[0.0], &[0.0, 0.0]),
            Err(ReelError::LengthMismatch { new: 1, old: 2 })
        ));
        assert!(matches!(
            importance_ratio(&[], &[]),
            Err(ReelError::EmptySequence)
        ));
    }

    #[test]
    fn clipped_loss_piecewise_values() {
        let l = clipped_loss(1.349859, 0.5, 0.2);
        assert!((l - (-0.6)).abs() < 1e-9, "got {l}");
        let l = clipped_loss(0.5, -0.4, 0.2);
        assert!((l - 0.32).abs() < 1e-9, "got {l}");
        for r in [-0.7, 0.0, 0.3] {
            assert!((clipped_loss(1.0, r, 0.2) - (-r)).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_loss_hand_value_and_properties() {
        let old = array![[0.75, 0.25]];
        let new = array![[0.5, 0.5]];
        let kl = kl_loss(old.view(), new.view()).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.130812).abs() < 1e-6);

        assert_eq!(kl_loss(old.view(), old.view()).unwrap(), 0.0);

        let mut rng = stream(7, "kl-pairs");
        let rand_dist = |rng: &mut rand_chacha::ChaCha12Rng| {
            let mut v: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            Array2::from_shape_vec((1, 6), v).unwrap()
        };
        for _ in 0..500 {
            let a = rand_dist(&mut rng);
            let b = rand_dist(&mut rng);
            let kl = kl_loss(a.view(), b.view()).unwrap();
            assert!(kl >= -1e-12, "Gibbs violated: {kl}");
        }

        let bad = array![[0.9, 0.3]];
        assert!(matches!(
            kl_loss(bad.view(), new.view()),
            Err(ReelError::NotNormalized { .. })
        ));
        assert!(matches!(
            kl_loss(old.view(), array![[0.5, 0.25, 0.25]].view()),
            Err(ReelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn subsets_are_deterministic_bags_with_replacement() {
        let mut rng = stream(1, "subset-data");
        let x = Array2::from_shape_simple_fn((500, 2), || rng.gen_range(-1.0..1.0));
        let y = Array1::from_shape_simple_fn(500, || rng.gen_range(-1.0..1.0));
        let config = FinetuneConfig {
            seed: 42,
            ..FinetuneConfig::default()
        };
        let subsets = sample_subsets(x.view(), y.view(), &config).unwrap();
        assert_eq!(subsets.len(), 128);
        let mut covered = vec![false; 500];
        for s in &subsets {
            assert_eq!(s.source_rows.len(), 200);
            assert_eq!(s.x.dim(), (200, 2));
            for (slot, &src) in s.source_rows.iter().enumerate() {
                assert!(src < 500);
                assert_eq!(s.x.row(slot), x.row(src));
                assert_eq!(s.y[slot], y[src]);
            }
            for &src in &s.source_rows {
                covered[src] = true;
            }
        }
        let coverage = covered.iter().filter(|&&c| c).count() as f64 / 500.0;
        assert!(coverage > 0.99, "coverage {coverage}");

        let again = sample_subsets(x.view(), y.view(), &config).unwrap();
        assert_eq!(again[7].source_rows, subsets[7].source_rows);
    }

    #[test]
    fn single_row_dataset_repeats_that_row() {
        let x = array![[3.0]];
        let y = array![5.0];
        let config = FinetuneConfig {
            n_subsets: 2,
            subset_size: 200,
            ..FinetuneConfig::default()
        };
        let subsets = sample_subsets(x.view(), y.view(), &config).unwrap();
        for s in &subsets {
            assert!(s.source_rows.iter().all(|&r| r == 0));
            assert!(s.x.iter().all(|&v| v == 3.0));
            assert!(s.y.iter().all(|&v| v == 5.0));
        }
    }

    fn tiny_policy(seed: u64) -> PolicySnapshot {
        let config = ModelConfig {
            width: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            memory_slots: 2,
            vocab_size: crate::expr::vocab::VOCAB_SIZE,
            max_seq_len: 16,
        };
        PolicySnapshot::init(config, seed).expect("init")
    }

    fn toy_dataset(n: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
        let mut rng = stream(seed, "toy-data");
        let x = Array2::from_shape_simple_fn((n, 2), || rng.gen_range(-2.0..2.0));
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]] + x[[i, 1]]);
        (x, y)
    }

    fn small_config() -> FinetuneConfig {
        FinetuneConfig {
            n_subsets: 4,
            subset_size: 16,
            epochs: 1,
            batch_size: 2,
            seed: 3,
            ..FinetuneConfig::default()
        }
    }

    /// A brief burst of supervised steps on (x0 + x1)-style triplets: enough
    /// signal that some rollouts parse, far from convergence.
    fn under_pretrained(seed: u64) -> PolicySnapshot {
        use crate::datagen::{build_triplet, Triplet};
        use crate::expr::{BinaryOp, Expression};
        let vocab = Vocabulary::standard();
        let mut policy = tiny_policy(seed);
        let mut rng = stream(seed, "under-pretrain");
        let f = Expression::Binary(
            BinaryOp::Add,
            Box::new(Expression::Variable(0)),
            Box::new(Expression::Variable(1)),
        );
        let triplets: Vec<Triplet> = (0..8)
            .map(|_| {
                let x = Array2::from_shape_simple_fn((16, 2), || rng.gen_range(-2.0..2.0));
                build_triplet(f.clone(), x, &vocab).expect("x0 + x1 is total")
            })
            .collect();
        let mut opt = AdamW::new(policy.params(), 1e-2);
        for _ in 0..70 {
            policy.pretrain_step(&triplets, &mut opt).expect("pretrain step");
        }
        policy
    }

    #[test]
    fn rollout_reward_improves_on_a_toy_equation() {
        let policy = under_pretrained(5);
        let (x, y) = toy_dataset(64, 9);
        let config = FinetuneConfig {
            n_subsets: 64,
            subset_size: 32,
            epochs: 10,
            batch_size: 16,
            learning_rate: 5e-3,
            seed: 1,
            ..FinetuneConfig::default()
        };
        let outcome = run_reel(&policy, x.view(), y.view(), &config).expect("finetune");
        assert!(outcome.error.is_none(), "aborted: {:?}", outcome.error.map(|e| e.to_string()));
        let spe = config.steps_per_epoch();
        let epoch_mean = |steps: &[StepDiagnostics]| {
            steps.iter().map(|s| s.mean_reward).sum::<f64>() / steps.len() as f64
        };
        let first = epoch_mean(&outcome.log[..spe]);
        let last = epoch_mean(&outcome.log[outcome.log.len() - spe..]);
        assert!(
            last > first,
            "reward did not improve: first epoch {first}, final epoch {last}"
        );
    }

    #[test]
    fn identity_start_gives_unit_ratios_and_tiny_kl() {
        let policy = tiny_policy(21);
        let (x, y) = toy_dataset(64, 1);
        let config = FinetuneConfig {
            batch_size: 4,
            ..small_config()
        };
        let subsets = sample_subsets(x.view(), y.view(), &config).unwrap();
        let mut theta = policy.clone_snapshot();
        let embeddings: Vec<LatentEmbedding> = subsets
            .iter()
            .map(|s| policy.encode(s.x.view(), s.y.view()).unwrap())
            .collect();
        let batch: Vec<(usize, &TrajectorySubset, &LatentEmbedding)> = subsets
            .iter()
            .zip(&embeddings)
            .enumerate()
            .map(|(i, (s, e))| (i, s, e))
            .collect();
        let mut opt = AdamW::new(theta.params(), config.learning_rate);
        let (diag, rollouts) =
            finetune_step(&mut theta, &policy, &batch, &config, 0, &mut opt).unwrap();
        for r in &rollouts {
            assert!((r.ratio - 1.0).abs() < 1e-9, "ρ = {}", r.ratio);
        }
        assert!(diag.kl.abs() < 1e-9, "kl = {}", diag.kl);
        let mean_reward: f64 =
            rollouts.iter().map(|r| r.reward).sum::<f64>() / rollouts.len() as f64;
        assert!(
            (diag.loss + mean_reward).abs() < 1e-9,
            "loss {} vs −mean reward {}",
            diag.loss,
            -mean_reward
        );
        assert_eq!(diag.step, 0);
    }

    #[test]
    fn reference_policy_is_never_mutated() {
        let policy = tiny_policy(22);
        let before = policy.checksum();
        let (x, y) = toy_dataset(32, 2);
        let config = small_config();
        let outcome = run_reel(&policy, x.view(), y.view(), &config).unwrap();
        assert!(outcome.error.is_none());
        assert_eq!(policy.checksum(), before);
        assert_eq!(outcome.log.len(), config.epochs * config.steps_per_epoch());
        assert_ne!(
            outcome.snapshot.checksum(),
            before,
            "finetuning should move the policy"
        );
    }

    #[test]
    fn zero_epochs_returns_bit_identical_snapshot() {
        let policy = tiny_policy(23);
        let (x, y) = toy_dataset(16, 3);
        let config = FinetuneConfig {
            epochs: 0,
            ..small_config()
        };
        let outcome = run_reel(&policy, x.view(), y.view(), &config).unwrap();
        assert_eq!(outcome.snapshot.checksum(), policy.checksum());
        assert!(outcome.log.is_empty());
        assert!(outcome.error.is_none());
    }

    #[test]
    fn runs_are_deterministic() {
        let policy = tiny_policy(24);
        let (x, y) = toy_dataset(32, 4);
        let config = small_config();
        let a = run_reel(&policy, x.view(), y.view(), &config).unwrap();
        let b = run_reel(&policy, x.view(), y.view(), &config).unwrap();
        assert_eq!(a.snapshot.checksum(), b.snapshot.checksum());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn invalid_rollouts_keep_the_invalid_reward() {
        // A fresh policy generates mostly unparseable sequences; every
        // invalid rollout must carry r2 = −1 and reward = smooth(−1).
        let policy = tiny_policy(25);
        let (x, y) = toy_dataset(32, 5);
        let config = FinetuneConfig {
            batch_size: 4,
            ..small_config()
        };
        let subsets = sample_subsets(x.view(), y.view(), &config).unwrap();
        let embeddings: Vec<LatentEmbedding> = subsets
            .iter()
            .map(|s| policy.encode(s.x.view(), s.y.view()).unwrap())
            .collect();
        let batch: Vec<(usize, &TrajectorySubset, &LatentEmbedding)> = subsets
            .iter()
            .zip(&embeddings)
            .enumerate()
            .map(|(i, (s, e))| (i, s, e))
            .collect();
        let mut theta = policy.clone_snapshot();
        let mut opt = AdamW::new(theta.params(), config.learning_rate);
        let (_, rollouts) =
            finetune_step(&mut theta, &policy, &batch, &config, 0, &mut opt).unwrap();
        let expected = smooth_reward(-1.0);
        let mut saw_invalid = false;
        for r in &rollouts {
            if !r.valid {
                saw_invalid = true;
                assert_eq!(r.r2, -1.0);
                assert_eq!(r.reward, expected);
            }
        }
        assert!(saw_invalid, "expected at least one invalid rollout");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = FinetuneConfig::default();
        assert!(ok.validate().is_ok());
        for (mutate, _) in [
            (FinetuneConfig { n_subsets: 0, ..ok.clone() }, "n_subsets"),
            (FinetuneConfig { subset_size: 0, ..ok.clone() }, "subset_size"),
            (FinetuneConfig { subset_size: 201, ..ok.clone() }, "subset_size"),
            (FinetuneConfig { batch_size: 0, ..ok.clone() }, "batch_size"),
            (FinetuneConfig { clip: 0.0, ..ok.clone() }, "clip"),
            (FinetuneConfig { clip: 1.0, ..ok.clone() }, "clip"),
            (FinetuneConfig { kl_coefficient: -0.1, ..ok.clone() }, "kl"),
            (FinetuneConfig { learning_rate: 0.0, ..ok.clone() }, "lr"),
            (FinetuneConfig { temperature: 0.0, ..ok.clone() }, "temperature"),
            (FinetuneConfig { beam_width: 0, ..ok.clone() }, "beam"),
        ] {
            assert!(mutate.validate().is_err());
        }
        assert_eq!(ok.steps_per_epoch(), 2);
    }

    #[test]
    fn defaults_match_the_reference_recipe() {
        let c = FinetuneConfig::default();
        assert_eq!(
            (c.n_subsets, c.subset_size, c.epochs, c.batch_size),
            (128, 200, 10, 64)
        );
        assert_eq!((c.clip, c.kl_coefficient, c.learning_rate), (0.2, 0.2, 5e-5));
        assert_eq!(c.decode_mode, RolloutDecode::Sample);
        assert_eq!(c.temperature, 1.0);
        assert_eq!(c.refresh_old_every, 0);
    }
}
