//! The encoder-decoder policy: snapshots of parameters plus the operations
//! the rest of the crate builds on — encoding data tables, stepwise and whole
//! -sequence decoding, teacher-forced scoring, cross-entropy pretraining, and
//! checkpointing.

pub mod checkpoint;
pub mod decode;
pub mod net;
pub mod optim;
pub mod params;
pub mod tape;

use crate::datagen::Triplet;
use crate::expr::vocab::SOS;
use crate::expr::Vocabulary;
use crate::rng::stream;
use checkpoint::CheckpointError;
use decode::{choose_greedy, choose_sample, IncrementalDecoder};
pub use decode::{DecodeMode, Generated};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
pub use net::ModelConfig;
use net::{decoder_logits_tape, encode_tape, featurize, init_params};
use optim::{AdamW, GradAccumulator};
use params::ParamStore;
use rand::Rng;
use std::path::Path;
use tape::{masked_log_softmax, masked_softmax, Tape};
use thiserror::Error;

/// Hard cap on encoder input rows, matching the input-size regime the
/// architecture is tuned for.
pub const MAX_INPUT_POINTS: usize = 200;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite loss on equation {equation}")]
    NonFiniteLoss { equation: String },
    #[error("non-finite gradient in batch")]
    NonFiniteGradient,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// A complete set of policy parameters with the architecture and vocabulary
/// they were built for. Immutable snapshots are safe to share across threads;
/// training steps require exclusive access.
pub struct PolicySnapshot {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
}

/// Fixed-shape summary of one (X, y) table: the decoder's cross-attention
/// memory, [memory_slots, width] regardless of n and d.
#[derive(Debug, Clone)]
pub struct LatentEmbedding {
    pub(crate) memory: Array2<f64>,
}

impl LatentEmbedding {
    pub fn shape(&self) -> (usize, usize) {
        self.memory.dim()
    }
}

impl PolicySnapshot {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        let mut rng = stream(seed, "model/init");
        let params = init_params(&config, &mut rng);
        Ok(PolicySnapshot {
            config,
            vocab: Vocabulary::standard(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable parameter access for optimizers and gradient checks.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Hex digest of all parameter bytes, for change detection in logs and
    /// tests.
    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Deep copy with independent parameters, used to freeze a reference
    /// policy.
    pub fn clone_snapshot(&self) -> Self {
        PolicySnapshot {
            config: self.config.clone(),
            vocab: Vocabulary::standard(),
            params: self.params.clone(),
        }
    }

    fn validate_table(&self, x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<(), ModelError> {
        let (n, d) = x.dim();
        if n == 0 {
            return Err(ModelError::Input("empty table".into()));
        }
        if n > MAX_INPUT_POINTS {
            return Err(ModelError::Input(format!(
                "{n} rows exceed the {MAX_INPUT_POINTS}-row encoder limit"
            )));
        }
        if d == 0 || d > crate::expr::vocab::MAX_DIM {
            return Err(ModelError::Input(format!(
                "{d} input dimensions outside 1..={}",
                crate::expr::vocab::MAX_DIM
            )));
        }
        if y.len() != n {
            return Err(ModelError::Input(format!(
                "{} targets for {n} rows",
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Input("non-finite table entry".into()));
        }
        Ok(())
    }

    /// Encodes a data table into the decoder's memory. Deterministic and
    /// permutation-invariant over rows.
    pub fn encode(
        &self,
        x: ArrayView2<f64>,
        y: ArrayView1<f64>,
    ) -> Result<LatentEmbedding, ModelError> {
        self.validate_table(x, y)?;
        let mut t = Tape::new(&self.params);
        let m = encode_tape(&mut t, &self.config, featurize(x, y));
        Ok(LatentEmbedding {
            memory: t.value(m).clone(),
        })
    }

    /// Starts stepwise decoding against an embedding. The prefix begins at
    /// the start token.
    pub fn decoder<'a>(&'a self, e: &LatentEmbedding) -> DecoderState<'a> {
        let mut inner = IncrementalDecoder::new(&self.params, &self.config, &e.memory);
        let row = inner.step(SOS);
        DecoderState {
            inner,
            config: &self.config,
            prefix: vec![SOS],
            row: Some(row),
        }
    }

    /// Whole-sequence decoding. Greedy and sampled modes return one
    /// sequence; beam returns up to `width`, best mean log-probability
    /// first. The rng is consulted only by sampling.
    pub fn generate(
        &self,
        e: &LatentEmbedding,
        mode: DecodeMode,
        rng: &mut impl Rng,
    ) -> Vec<Generated> {
        match mode {
            DecodeMode::Greedy => vec![decode::greedy(&self.params, &self.config, &e.memory)],
            DecodeMode::Sample { temperature } => vec![decode::sample(
                &self.params,
                &self.config,
                &e.memory,
                temperature,
                rng,
            )],
            DecodeMode::Beam { width } => {
                decode::beam(&self.params, &self.config, &e.memory, width)
            }
        }
    }

    fn validate_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() < 2 {
            return Err(ModelError::Input("sequence needs at least two tokens".into()));
        }
        if tokens[0] != SOS {
            return Err(ModelError::Input("sequence must begin with the start token".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::Input(format!(
                "{} tokens exceed the length cap {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| (t as usize) >= self.config.vocab_size) {
            return Err(ModelError::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let masked = self.config.masked_ids();
        if tokens[1..].iter().any(|&t| masked.contains(&(t as usize))) {
            return Err(ModelError::Input(
                "control token inside the generated portion".into(),
            ));
        }
        Ok(())
    }

    /// Teacher-forced log-probability of each generated token (everything
    /// after the start token) under this policy.
    pub fn score_sequence(
        &self,
        e: &LatentEmbedding,
        tokens: &[u32],
    ) -> Result<Vec<f64>, ModelError> {
        self.validate_tokens(tokens)?;
        let mut t = Tape::new(&self.params);
        let mem = t.constant(e.memory.clone());
        let input = &tokens[..tokens.len() - 1];
        let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
        let logits = decoder_logits_tape(&mut t, &self.config, mem, input);
        let lnp = t.gather_log_softmax(logits, &targets, &self.config.masked_ids());
        Ok(t.value(lnp).column(0).to_vec())
    }

    /// One cross-entropy step over a batch: the loss is the mean over all
    /// predicted tokens in the batch of −log π_θ(gold | state). Aborts
    /// without stepping if any sequence yields a non-finite loss.
    pub fn pretrain_step(
        &mut self,
        batch: &[Triplet],
        optimizer: &mut AdamW,
    ) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty pretraining batch".into()));
        }
        let masked = self.config.masked_ids();
        let total_tokens: usize = batch.iter().map(|t| t.tokens.ids().len() - 1).sum();
        let scale = 1.0 / total_tokens as f64;
        let mut acc = GradAccumulator::zeros(&self.params);
        let mut total = 0.0;
        for triplet in batch {
            let ids = triplet.tokens.ids();
            let mut tape = Tape::new(&self.params);
            let sum = sequence_logprob_tape(
                &mut tape,
                &self.config,
                triplet.x.view(),
                triplet.y.view(),
                ids,
                &masked,
            );
            let loss = tape.scale(sum, -scale);
            let contribution = tape.scalar_value(loss);
            if !contribution.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    equation: triplet.f.to_string(),
                });
            }
            total += contribution;
            acc.add_scaled(&tape.backward(loss), 1.0);
        }
        if !acc.all_finite() {
            return Err(ModelError::NonFiniteGradient);
        }
        optimizer.step(&mut self.params, &acc);
        Ok(total)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        checkpoint::save(path, &self.config, self.vocab.hash(), &self.params)?;
        Ok(())
    }

    /// Loads and verifies a checkpoint against the build's vocabulary.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let vocab = Vocabulary::standard();
        let (config, params) = checkpoint::load(path, vocab.hash())?;
        if !params.all_finite() {
            return Err(ModelError::Input(
                "checkpoint contains non-finite parameters".into(),
            ));
        }
        Ok(PolicySnapshot {
            config,
            vocab,
            params,
        })
    }
}

/// Builds the teacher-forced sum of token log-probabilities of `ids`
/// conditioned on (x, y), a [1, 1] node. Scaled by −1/tokens this is the
/// cross-entropy minimized during pretraining.
pub fn sequence_logprob_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    ids: &[u32],
    masked: &[usize],
) -> tape::NodeId {
    let feats = featurize(x, y);
    let mem = encode_tape(tape, config, feats);
    let input = &ids[..ids.len() - 1];
    let targets: Vec<usize> = ids[1..].iter().map(|&t| t as usize).collect();
    let logits = decoder_logits_tape(tape, config, mem, input);
    let lnp = tape.gather_log_softmax(logits, &targets, masked);
    tape.sum_all(lnp)
}

/// Stepwise decoding state: the embedding's key/value caches plus the token
/// prefix, which always begins with the start token.
pub struct DecoderState<'a> {
    inner: IncrementalDecoder<'a>,
    config: &'a ModelConfig,
    prefix: Vec<u32>,
    row: Option<Array1<f64>>,
}

impl DecoderState<'_> {
    pub fn prefix(&self) -> &[u32] {
        &self.prefix
    }

    /// The policy distribution over the next token: non-negative, summing to
    /// one, with control tokens at exactly zero. Panics once the prefix has
    /// reached the length cap.
    pub fn distribution(&self) -> Array1<f64> {
        let row = self.row.as_ref().expect("prefix at maximum length");
        masked_softmax(row.view(), &self.config.masked_ids())
    }

    /// Extends the prefix with an externally chosen token.
    pub fn push(&mut self, token: u32) {
        assert!(self.row.is_some(), "prefix at maximum length");
        assert!(
            (token as usize) < self.config.vocab_size,
            "token outside vocabulary"
        );
        self.prefix.push(token);
        self.row = if self.prefix.len() < self.config.max_seq_len {
            Some(self.inner.step(token))
        } else {
            None
        };
    }

    /// Argmax step, ties toward the lowest token id.
    pub fn step_greedy(&mut self) -> u32 {
        let row = self.row.as_ref().expect("prefix at maximum length");
        let token = choose_greedy(row.view(), &self.config.masked_ids());
        self.push(token);
        token
    }

    /// Draw from the temperature-scaled distribution.
    pub fn step_sample(&mut self, temperature: f64, rng: &mut impl Rng) -> u32 {
        let row = self.row.as_ref().expect("prefix at maximum length");
        let masked = self.config.masked_ids();
        let (p, _) = masked_log_softmax(row.view(), &masked);
        let token = choose_sample(row, &p, temperature, &masked, rng);
        self.push(token);
        token
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_triplet, sample_inputs};
    use crate::expr::vocab::{EOS, PAD, VOCAB_SIZE};
    use crate::expr::{tokenize, Expression};
    use ndarray::array;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            width: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            memory_slots: 2,
            vocab_size: 20,
            max_seq_len: 12,
        }
    }

    fn randomized(config: &ModelConfig, seed: u64) -> PolicySnapshot {
        let mut snap = PolicySnapshot::init(config.clone(), seed).expect("init");
        let mut rng = stream(seed, "model-test/out");
        for name in ["out.w", "out.b"] {
            let idx = snap.params.id(name);
            snap.params
                .value_mut(idx)
                .mapv_inplace(|_| rng.gen_range(-0.8..0.8));
        }
        snap
    }

    fn toy_embedding(snap: &PolicySnapshot) -> LatentEmbedding {
        snap.encode(array![[0.5], [1.5], [-0.25]].view(), array![1.0, 3.0, -0.5].view())
            .expect("encode")
    }

    #[test]
    fn encode_validates_inputs() {
        let snap = PolicySnapshot::init(tiny_config(), 1).expect("init");
        let bad_rows = Array2::zeros((MAX_INPUT_POINTS + 1, 2));
        let y = Array1::zeros(MAX_INPUT_POINTS + 1);
        assert!(matches!(
            snap.encode(bad_rows.view(), y.view()),
            Err(ModelError::Input(_))
        ));
        let wide = Array2::zeros((3, 11));
        assert!(snap.encode(wide.view(), Array1::zeros(3).view()).is_err());
        let nan = array![[f64::NAN]];
        assert!(snap.encode(nan.view(), array![1.0].view()).is_err());
        let one = snap.encode(array![[1.0]].view(), array![2.0].view());
        let e = one.expect("single row encodes");
        assert_eq!(e.shape(), (2, 8));
        assert!(e.memory.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn distribution_is_normalized_and_masked() {
        let snap = randomized(&tiny_config(), 2);
        let e = toy_embedding(&snap);
        let state = snap.decoder(&e);
        let p = state.distribution();
        assert!((p.sum() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert_eq!(p[PAD as usize], 0.0);
        assert_eq!(p[SOS as usize], 0.0);

        let uniform = PolicySnapshot::init(tiny_config(), 3).expect("init");
        let e = toy_embedding(&uniform);
        let p = uniform.decoder(&e).distribution();
        let expected = 1.0 / (tiny_config().vocab_size - 2) as f64;
        for (j, &v) in p.iter().enumerate() {
            if j == PAD as usize || j == SOS as usize {
                assert_eq!(v, 0.0);
            } else {
                assert!((v - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_matches_configured_odds() {
        // Zero hidden weights plus a crafted output bias give exactly
        // [0.1, 0.9] over the two unmasked tokens of a four-token vocabulary.
        let config = ModelConfig {
            vocab_size: 4,
            ..tiny_config()
        };
        let mut snap = PolicySnapshot::init(config, 4).expect("init");
        let idx = snap.params.id("out.b");
        snap.params.value_mut(idx)[[0, 3]] = 9f64.ln();
        let e = toy_embedding(&snap);
        let p = snap.decoder(&e).distribution();
        assert!((p[EOS as usize] - 0.1).abs() < 1e-12);
        assert!((p[3] - 0.9).abs() < 1e-12);

        let mut rng = stream(4, "draws");
        let mut hits = 0u32;
        for _ in 0..10_000 {
            let mut state = snap.decoder(&e);
            if state.step_sample(1.0, &mut rng) == 3 {
                hits += 1;
            }
        }
        let freq = hits as f64 / 10_000.0;
        assert!((freq - 0.9).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn near_zero_temperature_agrees_with_greedy() {
        let snap = randomized(&tiny_config(), 5);
        let mut rng = stream(5, "states");
        for trial in 0..1000 {
            let x = Array2::from_shape_simple_fn((4, 2), || rng.gen_range(-2.0..2.0));
            let y = Array1::from_shape_simple_fn(4, || rng.gen_range(-2.0..2.0));
            let e = snap.encode(x.view(), y.view()).expect("encode");
            let mut a = snap.decoder(&e);
            let mut b = snap.decoder(&e);
            for _ in 0..3 {
                let g = a.step_greedy();
                let s = b.step_sample(1e-6, &mut rng);
                assert_eq!(g, s, "trial {trial}");
                if g == EOS {
                    break;
                }
            }
        }
    }

    #[test]
    fn generated_logprobs_match_teacher_forced_scoring() {
        let snap = randomized(&tiny_config(), 6);
        let e = toy_embedding(&snap);
        let mut rng = stream(6, "gen");
        for mode in [
            DecodeMode::Greedy,
            DecodeMode::Sample { temperature: 1.0 },
            DecodeMode::Beam { width: 3 },
        ] {
            for g in snap.generate(&e, mode, &mut rng) {
                let scored = snap.score_sequence(&e, &g.tokens).expect("score");
                assert_eq!(scored.len(), g.logprobs.len());
                let gen_sum: f64 = g.logprobs.iter().sum();
                let score_sum: f64 = scored.iter().sum();
                assert!(
                    (gen_sum - score_sum).abs() < 1e-9,
                    "{mode:?}: {gen_sum} vs {score_sum}"
                );
            }
        }
    }

    #[test]
    fn greedy_sequence_scores_as_stepwise_argmax() {
        let snap = randomized(&tiny_config(), 7);
        let e = toy_embedding(&snap);
        let g = &snap.generate(&e, DecodeMode::Greedy, &mut stream(0, "unused"))[0];
        let mut state = snap.decoder(&e);
        for &token in &g.tokens[1..] {
            let p = state.distribution();
            let argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j as u32)
                .expect("non-empty");
            assert_eq!(argmax, token);
            state.push(token);
        }
    }

    #[test]
    fn scoring_rejects_malformed_sequences() {
        let snap = PolicySnapshot::init(tiny_config(), 8).expect("init");
        let e = toy_embedding(&snap);
        assert!(snap.score_sequence(&e, &[SOS]).is_err());
        assert!(snap.score_sequence(&e, &[EOS, EOS]).is_err());
        assert!(snap.score_sequence(&e, &[SOS, 99, EOS]).is_err());
        assert!(snap.score_sequence(&e, &[SOS, PAD, EOS]).is_err());
        let long = vec![SOS; 13];
        assert!(snap.score_sequence(&e, &long).is_err());
    }

    fn pretrain_batch() -> Vec<Triplet> {
        let vocab = Vocabulary::standard();
        let exprs = [
            Expression::Variable(0),
            Expression::Unary(
                crate::expr::vocab::UnaryOp::Sin,
                Box::new(Expression::Variable(0)),
            ),
        ];
        exprs
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let x = sample_inputs(6, 1, &mut stream(i as u64, "pretrain-batch"));
                build_triplet(f.clone(), x, &vocab).expect("valid triplet")
            })
            .collect()
    }

    #[test]
    fn fresh_policy_cross_entropy_is_log_vocab() {
        // The desk-scale vocabulary: uniform over everything but the two
        // control tokens.
        let mut snap = PolicySnapshot::init(ModelConfig::default(), 9).expect("init");
        let mut opt = AdamW::new(&snap.params, 1e-3);
        let batch = pretrain_batch();
        let loss = snap.pretrain_step(&batch, &mut opt).expect("step");
        let expected = ((VOCAB_SIZE - 2) as f64).ln();
        assert!(
            (loss - expected).abs() < 1e-12,
            "loss {loss} vs ln(unmasked)={expected}"
        );
    }

    #[test]
    fn repeated_batch_overfits_monotonically() {
        let config = ModelConfig {
            vocab_size: VOCAB_SIZE,
            max_seq_len: 16,
            ..tiny_config()
        };
        let mut snap = PolicySnapshot::init(config, 10).expect("init");
        let mut opt = AdamW::new(&snap.params, 1e-3);
        let batch = pretrain_batch();
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(snap.pretrain_step(&batch, &mut opt).expect("step"));
        }
        for i in 10..losses.len() - 1 {
            assert!(
                losses[i + 1] < losses[i],
                "loss rose at step {}: {} -> {}",
                i,
                losses[i],
                losses[i + 1]
            );
        }
        assert!(
            losses[losses.len() - 1] < 0.5 * losses[0],
            "failed to overfit: {} -> {}",
            losses[0],
            losses[losses.len() - 1]
        );
    }

    #[test]
    fn pretrain_rejects_non_finite_inputs() {
        let mut snap = PolicySnapshot::init(tiny_config(), 11).expect("init");
        let mut opt = AdamW::new(&snap.params, 1e-3);
        let before = snap.checksum();
        let mut batch = pretrain_batch();
        batch[0].x[[0, 0]] = f64::NAN;
        let result = snap.pretrain_step(&batch, &mut opt);
        assert!(matches!(result, Err(ModelError::NonFiniteLoss { .. })));
        assert_eq!(snap.checksum(), before, "abort must not update parameters");
    }

    #[test]
    fn snapshot_roundtrip_preserves_everything() {
        let snap = randomized(&tiny_config(), 12);
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("policy.ckpt");
        snap.save(&path).expect("save");
        let loaded = PolicySnapshot::load(&path).expect("load");
        assert_eq!(loaded.checksum(), snap.checksum());
        assert_eq!(loaded.config(), snap.config());
        assert_eq!(loaded.vocab().hash(), snap.vocab().hash());
    }

    #[test]
    fn scoring_a_tokenized_expression_gives_one_logprob_per_token() {
        let config = ModelConfig {
            vocab_size: VOCAB_SIZE,
            max_seq_len: 16,
            ..tiny_config()
        };
        let snap = randomized(&config, 13);
        let e = toy_embedding(&snap);
        let expr = Expression::Binary(
            crate::expr::vocab::BinaryOp::Add,
            Box::new(Expression::Variable(0)),
            Box::new(Expression::Variable(0)),
        );
        let seq = tokenize(&expr, snap.vocab()).expect("tokenize");
        let scores = snap.score_sequence(&e, seq.ids()).expect("score");
        assert_eq!(scores.len(), seq.ids().len() - 1);
        assert!(scores.iter().all(|&s| s <= 0.0));
    }
}
