//! Synthetic pretraining corpus: random formulas, Gaussian inputs, and the
//! streamable triplet file format.
//!
//! Each triplet pairs an input matrix `X` with the targets `y` obtained by
//! evaluating a randomly sampled formula on it. Sampling is rejection-based:
//! draws whose evaluation is invalid, whose targets overflow the cap, or
//! whose encoding exceeds the length bound are discarded and counted.

use crate::expr::{
    self, evaluate, tokenize, vocab, BinaryOp, Expression, TokenSequence, UnaryOp, Vocabulary,
};
use crate::rng::stream_indexed;
use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// Targets with any |y| above this are rejected; runaway compositions like
/// exp(exp(x)) otherwise destabilize pretraining.
pub const TARGET_CAP: f64 = 1e12;

/// Corpus file format version.
pub const CORPUS_VERSION: u32 = 1;

/// Configuration for corpus generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Number of accepted triplets to produce.
    pub n_triplets: usize,
    /// Inclusive [low, high] range the per-triplet dimensionality is drawn
    /// from; high ≤ 10.
    pub dim_range: [usize; 2],
    /// Rows per triplet, at most 200.
    pub points_per_triplet: usize,
    /// Maximum formula tree depth; a lone leaf has depth 1.
    pub max_depth: usize,
    /// Relative sampling weight per operator name.
    pub operator_weights: BTreeMap<String, f64>,
    /// Probability that a leaf is a constant rather than a variable.
    pub constant_prob: f64,
    pub seed: u64,
}

fn default_operator_weights() -> BTreeMap<String, f64> {
    all_operator_names().map(|n| (n.to_string(), 1.0)).collect()
}

fn all_operator_names() -> impl Iterator<Item = &'static str> {
    vocab::UNARY_OPS
        .iter()
        .map(|o| o.name())
        .chain(vocab::BINARY_OPS.iter().map(|o| o.name()))
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_triplets: 1000,
            dim_range: [1, 10],
            points_per_triplet: 200,
            max_depth: 6,
            operator_weights: default_operator_weights(),
            constant_prob: 0.3,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let fail = |msg: String| Err(DatagenError::InvalidConfig(msg));
        if self.n_triplets == 0 {
            return fail("n_triplets must be positive".into());
        }
        let [lo, hi] = self.dim_range;
        if lo < 1 || hi < lo || hi > expr::MAX_DIM {
            return fail(format!(
                "dim_range [{lo}, {hi}] must satisfy 1 <= low <= high <= {}",
                expr::MAX_DIM
            ));
        }
        if self.points_per_triplet == 0 || self.points_per_triplet > 200 {
            return fail(format!(
                "points_per_triplet {} must be in 1..=200",
                self.points_per_triplet
            ));
        }
        if self.max_depth == 0 {
            return fail("max_depth must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.constant_prob) {
            return fail(format!("constant_prob {} not in [0, 1]", self.constant_prob));
        }
        let known: Vec<&str> = all_operator_names().collect();
        for name in self.operator_weights.keys() {
            if !known.contains(&name.as_str()) {
                return fail(format!("unknown operator {name:?} in operator_weights"));
            }
        }
        let weights: Vec<f64> = known
            .iter()
            .map(|n| self.operator_weights.get(*n).copied().unwrap_or(0.0))
            .collect();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return fail("operator_weights must be finite and non-negative".into());
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return fail("operator_weights must not all be zero".into());
        }
        Ok(())
    }
}

/// One corpus entry: inputs, targets, the source formula, and its encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub f: Expression,
    pub tokens: TokenSequence,
}

impl Triplet {
    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// Why a sampled (formula, inputs) draw was discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    /// Evaluation hit a domain error or non-finite value.
    Invalid(expr::FailureReason),
    /// Some |y| exceeded [`TARGET_CAP`].
    TargetOverflow,
    /// The formula encodes to more than the maximum sequence length.
    TokenOverflow,
}

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed corpus record: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: corpus format version {found}, expected {expected}")]
    Version {
        path: String,
        found: u32,
        expected: u32,
    },
}

struct OpSampler {
    ops: Vec<OpChoice>,
    index: WeightedIndex<f64>,
}

#[derive(Clone, Copy)]
enum OpChoice {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

impl OpSampler {
    fn new(config: &GenConfig) -> Self {
        let mut ops = Vec::new();
        let mut weights = Vec::new();
        for op in vocab::UNARY_OPS {
            ops.push(OpChoice::Unary(op));
            weights.push(config.operator_weights.get(op.name()).copied().unwrap_or(0.0));
        }
        for op in vocab::BINARY_OPS {
            ops.push(OpChoice::Binary(op));
            weights.push(config.operator_weights.get(op.name()).copied().unwrap_or(0.0));
        }
        let index = WeightedIndex::new(&weights).expect("validated weights");
        OpSampler { ops, index }
    }

    fn draw(&self, rng: &mut impl Rng) -> OpChoice {
        self.ops[self.index.sample(rng)]
    }
}

/// Samples a random formula; the dimensionality is drawn from
/// `config.dim_range` first, then the tree over that many variables.
pub fn sample_expression(config: &GenConfig, rng: &mut impl Rng) -> Expression {
    let (_, expr) = sample_dim_and_expression(config, &OpSampler::new(config), rng);
    expr
}

fn sample_dim_and_expression(
    config: &GenConfig,
    ops: &OpSampler,
    rng: &mut impl Rng,
) -> (usize, Expression) {
    let [lo, hi] = config.dim_range;
    let d = rng.gen_range(lo..=hi);
    let expr = sample_node(config, ops, d, 1, rng);
    (d, expr)
}

/// Recursive descent; the leaf probability ramps linearly with the level so
/// the expected depth sits near half the bound.
fn sample_node(
    config: &GenConfig,
    ops: &OpSampler,
    d: usize,
    level: usize,
    rng: &mut impl Rng,
) -> Expression {
    let leaf_prob = level as f64 / config.max_depth as f64;
    if level >= config.max_depth || rng.gen::<f64>() < leaf_prob {
        return sample_leaf(config, d, rng);
    }
    match ops.draw(rng) {
        OpChoice::Unary(op) => {
            let a = sample_node(config, ops, d, level + 1, rng);
            Expression::Unary(op, Box::new(a))
        }
        OpChoice::Binary(BinaryOp::Pow) => {
            // Powers are kept real-valued by restricting the exponent to a
            // small nonzero integer constant.
            let a = sample_node(config, ops, d, level + 1, rng);
            let exps = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
            let e = exps[rng.gen_range(0..exps.len())];
            Expression::Binary(BinaryOp::Pow, Box::new(a), Box::new(Expression::Constant(e)))
        }
        OpChoice::Binary(op) => {
            let a = sample_node(config, ops, d, level + 1, rng);
            let b = sample_node(config, ops, d, level + 1, rng);
            Expression::Binary(op, Box::new(a), Box::new(b))
        }
    }
}

fn sample_leaf(config: &GenConfig, d: usize, rng: &mut impl Rng) -> Expression {
    if rng.gen::<f64>() < config.constant_prob {
        // Constants are drawn on the token grid (4 significant digits,
        // magnitudes between 1e-2 and 1e3) so encoding is always exact.
        let mantissa = rng.gen_range(1000..=9999u32);
        let exponent = rng.gen_range(-5..=-1i32);
        let negative = rng.gen::<bool>();
        Expression::Constant(expr::decode_constant(negative, mantissa, exponent))
    } else {
        Expression::Variable(rng.gen_range(0..d))
    }
}

/// Draws an n x d matrix of i.i.d. standard normal entries.
pub fn sample_inputs(n: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng))
}

/// Evaluates `f` on `x` and packages the triplet, or reports why the draw
/// must be rejected.
pub fn build_triplet(
    f: Expression,
    x: Array2<f64>,
    vocab: &Vocabulary,
) -> Result<Triplet, Rejection> {
    let result = evaluate(&f, x.view());
    if !result.valid {
        return Err(Rejection::Invalid(
            result.failure_reason.unwrap_or(expr::FailureReason::NonFinite),
        ));
    }
    if result.values.iter().any(|v| v.abs() > TARGET_CAP) {
        return Err(Rejection::TargetOverflow);
    }
    let tokens = tokenize(&f, vocab).map_err(|_| Rejection::TokenOverflow)?;
    Ok(Triplet {
        x,
        y: result.values,
        f,
        tokens,
    })
}

/// A generated corpus plus its rejection count.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: GenConfig,
    pub triplets: Vec<Triplet>,
    pub rejected: u64,
}

/// Generates `config.n_triplets` accepted triplets.
///
/// Triplet `i` draws from its own random stream, so the corpus is identical
/// regardless of worker count, and retries stay local to one triplet.
pub fn generate_corpus(config: &GenConfig, vocab: &Vocabulary) -> Result<Corpus, DatagenError> {
    config.validate()?;
    let results: Vec<(Triplet, u64)> = (0..config.n_triplets)
        .into_par_iter()
        .map(|i| {
            let ops = OpSampler::new(config);
            let mut rng = stream_indexed(config.seed, "datagen/triplet", i as u64);
            let mut rejected = 0u64;
            loop {
                let (d, f) = sample_dim_and_expression(config, &ops, &mut rng);
                let x = sample_inputs(config.points_per_triplet, d, &mut rng);
                match build_triplet(f, x, vocab) {
                    Ok(t) => return (t, rejected),
                    Err(_) => rejected += 1,
                }
            }
        })
        .collect();
    let rejected = results.iter().map(|(_, r)| r).sum();
    let triplets = results.into_iter().map(|(t, _)| t).collect();
    Ok(Corpus {
        config: config.clone(),
        triplets,
        rejected,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: GenConfig,
    rejected: u64,
}

#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<u32>,
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    d: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> DatagenError {
    DatagenError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> DatagenError {
    DatagenError::Format {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Writes a corpus as one manifest line followed by one JSON record per
/// triplet. Floats serialize losslessly.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), DatagenError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let manifest = Manifest {
        version: CORPUS_VERSION,
        config: corpus.config.clone(),
        rejected: corpus.rejected,
    };
    let mut write_line = |value: String| -> Result<(), DatagenError> {
        w.write_all(value.as_bytes()).map_err(|e| io_err(path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))
    };
    write_line(serde_json::to_string(&manifest).expect("manifest serializes"))?;
    for t in &corpus.triplets {
        let record = Record {
            tokens: t.tokens.ids().to_vec(),
            x: t.x.rows().into_iter().map(|r| r.to_vec()).collect(),
            y: t.y.to_vec(),
            d: t.dim(),
        };
        write_line(serde_json::to_string(&record).expect("record serializes"))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a corpus back; the inverse of [`write_corpus`].
///
/// The manifest is validated before any record is parsed, so a bad header
/// never yields a partial corpus.
pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Corpus, DatagenError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(Ok(line)) => line,
        Some(Err(e)) => return Err(io_err(path, e)),
        None => return Err(format_err(path, 1, "empty file, missing manifest")),
    };
    let manifest: Manifest = serde_json::from_str(&header)
        .map_err(|e| format_err(path, 1, format!("manifest: {e}")))?;
    if manifest.version != CORPUS_VERSION {
        return Err(DatagenError::Version {
            path: path.display().to_string(),
            found: manifest.version,
            expected: CORPUS_VERSION,
        });
    }
    let mut triplets = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| format_err(path, line_no, e.to_string()))?;
        let n = record.x.len();
        if record.y.len() != n {
            return Err(format_err(path, line_no, "y length differs from X rows"));
        }
        if record.x.iter().any(|row| row.len() != record.d) {
            return Err(format_err(path, line_no, "X row width differs from d"));
        }
        let mut x = Array2::zeros((n, record.d));
        for (i, row) in record.x.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                x[[i, j]] = *v;
            }
        }
        let tokens = TokenSequence::from_ids(record.tokens)
            .map_err(|e| format_err(path, line_no, e.to_string()))?;
        let f = expr::parse(&tokens, vocab)
            .map_err(|e| format_err(path, line_no, e.to_string()))?;
        triplets.push(Triplet {
            x,
            y: Array1::from_vec(record.y),
            f,
            tokens,
        });
    }
    Ok(Corpus {
        config: manifest.config,
        triplets,
        rejected: manifest.rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small_config() -> GenConfig {
        GenConfig {
            n_triplets: 20,
            dim_range: [1, 3],
            points_per_triplet: 16,
            max_depth: 4,
            seed: 11,
            ..GenConfig::default()
        }
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let ok = small_config();
        assert!(ok.validate().is_ok());
        for (label, bad) in [
            ("zero triplets", GenConfig { n_triplets: 0, ..ok.clone() }),
            ("dim 0", GenConfig { dim_range: [0, 3], ..ok.clone() }),
            ("dim 11", GenConfig { dim_range: [1, 11], ..ok.clone() }),
            ("inverted dims", GenConfig { dim_range: [3, 2], ..ok.clone() }),
            ("too many points", GenConfig { points_per_triplet: 201, ..ok.clone() }),
            ("zero depth", GenConfig { max_depth: 0, ..ok.clone() }),
            ("bad prob", GenConfig { constant_prob: 1.5, ..ok.clone() }),
            (
                "zero weights",
                GenConfig {
                    operator_weights: all_operator_names().map(|n| (n.into(), 0.0)).collect(),
                    ..ok.clone()
                },
            ),
            (
                "unknown op",
                GenConfig {
                    operator_weights: [("tan".to_string(), 1.0)].into_iter().collect(),
                    ..ok.clone()
                },
            ),
        ] {
            assert!(bad.validate().is_err(), "{label} should fail validation");
        }
    }

    #[test]
    fn max_depth_one_always_leaf() {
        let config = GenConfig {
            max_depth: 1,
            ..small_config()
        };
        let mut rng = stream(1, "test");
        for _ in 0..100 {
            let e = sample_expression(&config, &mut rng);
            assert_eq!(e.depth(), 1);
        }
    }

    #[test]
    fn sampled_trees_respect_depth_and_dim() {
        let config = small_config();
        let mut rng = stream(2, "test");
        for _ in 0..500 {
            let e = sample_expression(&config, &mut rng);
            assert!(e.depth() <= config.max_depth);
            if let Some(i) = e.max_var_index() {
                assert!(i < config.dim_range[1]);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let config = small_config();
        let a: Vec<Expression> = {
            let mut rng = stream(3, "det");
            (0..50).map(|_| sample_expression(&config, &mut rng)).collect()
        };
        let b: Vec<Expression> = {
            let mut rng = stream(3, "det");
            (0..50).map(|_| sample_expression(&config, &mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn binary_operator_frequencies_near_uniform() {
        // Count binary operators over 10,000 sampled trees with uniform
        // weights; each should land within 20% of the uniform share.
        let config = GenConfig {
            max_depth: 5,
            constant_prob: 0.2,
            ..small_config()
        };
        let mut rng = stream(4, "freq");
        let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
        fn walk(e: &Expression, counts: &mut BTreeMap<&'static str, usize>) {
            match e {
                Expression::Binary(op, a, b) => {
                    *counts.entry(op.name()).or_default() += 1;
                    walk(a, counts);
                    walk(b, counts);
                }
                Expression::Unary(_, a) => walk(a, counts),
                _ => {}
            }
        }
        for _ in 0..10_000 {
            walk(&sample_expression(&config, &mut rng), &mut counts);
        }
        let total: usize = counts.values().sum();
        let uniform = total as f64 / 5.0;
        for op in vocab::BINARY_OPS {
            let n = counts.get(op.name()).copied().unwrap_or(0) as f64;
            assert!(
                (n - uniform).abs() <= 0.2 * uniform,
                "{} count {n} vs uniform {uniform}",
                op.name()
            );
        }
    }

    #[test]
    fn pow_exponents_are_small_integer_constants() {
        let mut weights = default_operator_weights();
        for (name, w) in weights.iter_mut() {
            *w = if name == "pow" { 1.0 } else { 0.01 };
        }
        let config = GenConfig {
            operator_weights: weights,
            ..small_config()
        };
        let mut rng = stream(5, "pow");
        let mut seen = 0;
        fn walk(e: &Expression, seen: &mut usize) {
            match e {
                Expression::Binary(BinaryOp::Pow, a, b) => {
                    match **b {
                        Expression::Constant(c) => {
                            assert!(c.fract() == 0.0 && (-3.0..=3.0).contains(&c) && c != 0.0)
                        }
                        _ => panic!("pow exponent must be a constant"),
                    }
                    *seen += 1;
                    walk(a, seen);
                }
                Expression::Binary(_, a, b) => {
                    walk(a, seen);
                    walk(b, seen);
                }
                Expression::Unary(_, a) => walk(a, seen),
                _ => {}
            }
        }
        for _ in 0..500 {
            walk(&sample_expression(&config, &mut rng), &mut seen);
        }
        assert!(seen > 10, "pow never sampled");
    }

    #[test]
    fn gaussian_inputs_have_standard_moments() {
        let mut rng = stream(6, "inputs");
        let x = sample_inputs(200, 2, &mut rng);
        for col in x.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 0.2, "column mean {mean}");
            assert!((var - 1.0).abs() < 0.3, "column variance {var}");
        }
        let mut rng_a = stream(7, "inputs");
        let mut rng_b = stream(7, "inputs");
        assert_eq!(sample_inputs(5, 3, &mut rng_a), sample_inputs(5, 3, &mut rng_b));
    }

    #[test]
    fn build_triplet_rejections() {
        let v = Vocabulary::standard();
        let log_x = Expression::Unary(UnaryOp::Log, Box::new(Expression::Variable(0)));
        let x = ndarray::array![[1.0], [-2.0]];
        assert_eq!(
            build_triplet(log_x, x, &v),
            Err(Rejection::Invalid(expr::FailureReason::DomainError))
        );

        let exp_exp = Expression::Unary(
            UnaryOp::Exp,
            Box::new(Expression::Unary(UnaryOp::Exp, Box::new(Expression::Variable(0)))),
        );
        let x = ndarray::array![[5.0]];
        assert_eq!(build_triplet(exp_exp, x, &v), Err(Rejection::TargetOverflow));

        let ok = Expression::Binary(
            BinaryOp::Add,
            Box::new(Expression::Variable(0)),
            Box::new(Expression::Variable(1)),
        );
        let x = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        let t = build_triplet(ok, x, &v).unwrap();
        assert_eq!(t.y, ndarray::array![3.0, 7.0]);
        assert_eq!(t.dim(), 2);
    }

    #[test]
    fn corpus_generation_verifies_and_roundtrips() {
        let v = Vocabulary::standard();
        let corpus = generate_corpus(&small_config(), &v).unwrap();
        assert_eq!(corpus.triplets.len(), 20);
        for t in &corpus.triplets {
            let r = evaluate(&t.f, t.x.view());
            assert!(r.valid);
            assert_eq!(r.values, t.y, "stored targets must re-verify bit-exactly");
            assert_eq!(tokenize(&t.f, &v).unwrap(), t.tokens);
        }

        let again = generate_corpus(&small_config(), &v).unwrap();
        assert_eq!(corpus, again, "same config and seed must reproduce the corpus");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus(&corpus, &path).unwrap();
        let back = read_corpus(&path, &v).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn empty_corpus_roundtrips() {
        let v = Vocabulary::standard();
        let corpus = Corpus {
            config: small_config(),
            triplets: vec![],
            rejected: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_corpus(&corpus, &path).unwrap();
        assert_eq!(read_corpus(&path, &v).unwrap(), corpus);
    }

    #[test]
    fn corrupted_header_is_a_version_error_without_partial_read() {
        let v = Vocabulary::standard();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"version\":99,\"config\":{},\"rejected\":0}\njunk\n").unwrap();
        match read_corpus(&path, &v) {
            Err(DatagenError::Version { found: 99, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            read_corpus(&path, &v),
            Err(DatagenError::Format { line: 1, .. })
        ));
    }
}
