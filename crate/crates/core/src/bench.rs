//! Benchmark harness: CSV datasets, seeded 75/25 splits, best-of-k candidate
//! evaluation with train-R² selection, Gaussian noise injection, and
//! deterministic report emission.

use crate::expr::token::parse_ids;
use crate::expr::vocab::MAX_DIM;
use crate::expr::{evaluate, Expression};
use crate::model::{DecodeMode, PolicySnapshot};
use crate::reel::compute_r2;
use crate::rng::{stream, stream_indexed};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// Most rows the encoder conditions on; larger training splits are
/// subsampled to this size.
pub const ENCODER_ROW_CAP: usize = crate::model::MAX_INPUT_POINTS;

const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing header row")]
    MissingHeader { path: PathBuf },
    #[error("{path}: header must be x0,...,x{{d-1}},y; found `{found}`")]
    BadHeader { path: PathBuf, found: String },
    #[error("{path}: row {row}, column `{column}`: `{value}` is not a finite number")]
    BadCell {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path}: row {row} has {found} cells, expected {expected}")]
    RaggedRow {
        path: PathBuf,
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("dataset `{name}` has {d} input dimensions, limit {MAX_DIM}")]
    TooManyDims { name: String, d: usize },
    #[error("dataset `{name}` has {n} rows; at least 4 are required for a 75/25 split")]
    TooFewRows { name: String, n: usize },
    #[error("train fraction {fraction} leaves an empty split for {n} rows")]
    BadSplit { fraction: f64, n: usize },
    #[error("noise level {0} is negative")]
    NegativeNoise(f64),
    #[error("samples_per_eq must be positive")]
    NoCandidates,
    #[error("nothing to report: no evaluated equations")]
    EmptyReport,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// One named regression problem: inputs `x` ([n, d]), targets `y`, and the
/// generating expression when known.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub truth: Option<String>,
}

impl Dataset {
    /// Validates the dimensional bounds: at most ten input columns, at least
    /// four rows.
    pub fn new(
        name: impl Into<String>,
        x: Array2<f64>,
        y: Array1<f64>,
        truth: Option<String>,
    ) -> Result<Self, BenchError> {
        let name = name.into();
        let (n, d) = x.dim();
        assert_eq!(y.len(), n, "row count mismatch between inputs and targets");
        if d > MAX_DIM {
            return Err(BenchError::TooManyDims { name, d });
        }
        if n < 4 {
            return Err(BenchError::TooFewRows { name, n });
        }
        Ok(Dataset { name, x, y, truth })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// Reads a dataset from a CSV file with header `x0,...,x{d-1},y`. The
/// dataset name is the file stem.
pub fn load_csv(path: &Path) -> Result<Dataset, BenchError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.is_empty() || header.iter().all(|c| c.is_empty()) {
        return Err(BenchError::MissingHeader { path: path.to_path_buf() });
    }
    let d = header.len() - 1;
    let well_formed = d >= 1
        && header.iter().take(d).enumerate().all(|(i, c)| c == format!("x{i}"))
        && header.iter().nth(d) == Some("y");
    if !well_formed {
        return Err(BenchError::BadHeader {
            path: path.to_path_buf(),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    if d > MAX_DIM {
        return Err(BenchError::TooManyDims { name, d });
    }

    let mut values: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = idx + 2;
        for (col, cell) in record.iter().enumerate() {
            let parsed: f64 = cell.parse().unwrap_or(f64::NAN);
            if !parsed.is_finite() {
                return Err(BenchError::BadCell {
                    path: path.to_path_buf(),
                    row,
                    column: header.get(col).unwrap_or("?").to_string(),
                    value: cell.to_string(),
                });
            }
            values.push(parsed);
        }
        n += 1;
    }
    let mut x = Array2::zeros((n, d));
    let mut y = Array1::zeros(n);
    for row in 0..n {
        for col in 0..d {
            x[[row, col]] = values[row * (d + 1) + col];
        }
        y[row] = values[row * (d + 1) + d];
    }
    Dataset::new(name, x, y, None)
}

fn csv_error(path: &Path, e: csv::Error) -> BenchError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => BenchError::Io {
            path: path.to_path_buf(),
            source,
        },
        csv::ErrorKind::UnequalLengths { pos, expected_len, len } => BenchError::RaggedRow {
            path: path.to_path_buf(),
            row: pos.map_or(0, |p| p.line() as usize),
            found: len as usize,
            expected: expected_len as usize,
        },
        other => BenchError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(format!("{other:?}")),
        },
    }
}

/// Splits rows into disjoint train and test sets: a seeded permutation, the
/// first round(fraction·n) rows to train. The permutation is keyed by the
/// seed and the dataset name, so every component sees the same split.
pub fn split(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), BenchError> {
    let n = dataset.len();
    if n < 4 {
        return Err(BenchError::TooFewRows {
            name: dataset.name.clone(),
            n,
        });
    }
    let train_n = (train_fraction * n as f64).round() as usize;
    if train_n == 0 || train_n >= n {
        return Err(BenchError::BadSplit {
            fraction: train_fraction,
            n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, &format!("bench/split/{}", dataset.name));
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let take = |rows: &[usize]| {
        let mut x = Array2::zeros((rows.len(), dataset.dim()));
        let mut y = Array1::zeros(rows.len());
        for (out, &src) in rows.iter().enumerate() {
            x.row_mut(out).assign(&dataset.x.row(src));
            y[out] = dataset.y[src];
        }
        (x, y)
    };
    let (train_x, train_y) = take(&order[..train_n]);
    let (test_x, test_y) = take(&order[train_n..]);
    Ok((
        Dataset {
            name: dataset.name.clone(),
            x: train_x,
            y: train_y,
            truth: dataset.truth.clone(),
        },
        Dataset {
            name: dataset.name.clone(),
            x: test_x,
            y: test_y,
            truth: dataset.truth.clone(),
        },
    ))
}

/// Adds Gaussian noise scaled by the target spread: y' = y + σ·std(y)·ξ.
/// σ = 0 returns the input bit-for-bit.
pub fn inject_noise(y: ArrayView1<f64>, sigma: f64, rng: &mut impl Rng) -> Array1<f64> {
    assert!(sigma >= 0.0, "noise level must be non-negative");
    if sigma == 0.0 {
        return y.to_owned();
    }
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let std = (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let scale = sigma * std;
    y.map(|v| {
        let xi: f64 = StandardNormal.sample(rng);
        v + scale * xi
    })
}

/// Evaluation protocol settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub decode: DecodeMode,
    /// Candidates generated per equation; the one with the best training R²
    /// is scored on the test rows.
    pub samples_per_eq: usize,
    pub train_fraction: f64,
    /// Gaussian noise level applied to training targets before conditioning
    /// and selection.
    pub noise_train: f64,
    /// Gaussian noise level applied to test targets before scoring.
    pub noise_test: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            decode: DecodeMode::Sample { temperature: 1.0 },
            samples_per_eq: 16,
            train_fraction: 0.75,
            noise_train: 0.0,
            noise_test: 0.0,
            seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.samples_per_eq == 0 {
            return Err(BenchError::NoCandidates);
        }
        if self.noise_train < 0.0 {
            return Err(BenchError::NegativeNoise(self.noise_train));
        }
        if self.noise_test < 0.0 {
            return Err(BenchError::NegativeNoise(self.noise_test));
        }
        Ok(())
    }
}

/// Result of evaluating one equation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquationRecord {
    pub name: String,
    /// Best candidate in infix form, or None when every candidate failed.
    pub expression: Option<String>,
    pub train_r2: f64,
    pub test_r2: f64,
    pub fit_seconds: f64,
    pub predict_seconds: f64,
}

/// Aggregate metrics over a set of equations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub mean_r2: f64,
    pub proportion_gt_099: f64,
    pub fit_seconds: f64,
    pub predict_seconds: f64,
    pub equations: Vec<EquationRecord>,
}

impl Metrics {
    /// Aggregates per-equation records: mean test R², the fraction above
    /// 0.99, and summed wall-clock times. Records are sorted by name.
    pub fn from_records(mut equations: Vec<EquationRecord>) -> Result<Self, BenchError> {
        if equations.is_empty() {
            return Err(BenchError::EmptyReport);
        }
        equations.sort_by(|a, b| a.name.cmp(&b.name));
        let n = equations.len() as f64;
        Ok(Metrics {
            mean_r2: equations.iter().map(|e| e.test_r2).sum::<f64>() / n,
            proportion_gt_099: equations.iter().filter(|e| e.test_r2 > 0.99).count() as f64 / n,
            fit_seconds: equations.iter().map(|e| e.fit_seconds).sum(),
            predict_seconds: equations.iter().map(|e| e.predict_seconds).sum(),
            equations,
        })
    }
}

/// Training-split R² of one candidate token sequence, with the parsed
/// expression. Unparseable or non-evaluating candidates score −1.
fn score_candidate(
    tokens: &[u32],
    x: &Array2<f64>,
    y: &Array1<f64>,
    snapshot: &PolicySnapshot,
) -> (Option<Expression>, f64) {
    match parse_ids(tokens, snapshot.vocab()) {
        Ok(expr) => {
            let result = evaluate(&expr, x.view());
            let r2 = compute_r2(y.view(), &result);
            if result.valid {
                (Some(expr), r2)
            } else {
                (None, -1.0)
            }
        }
        Err(_) => (None, -1.0),
    }
}

/// Picks the candidate with the strictly best training R² (ties keep the
/// earliest), returning its index, expression, and score. Test rows are
/// never consulted.
pub fn select_candidate(
    candidates: &[Vec<u32>],
    train_x: &Array2<f64>,
    train_y: &Array1<f64>,
    snapshot: &PolicySnapshot,
) -> (usize, Option<Expression>, f64) {
    assert!(!candidates.is_empty(), "no candidates to select from");
    let mut best = (0usize, None, f64::NEG_INFINITY);
    for (i, tokens) in candidates.iter().enumerate() {
        let (expr, r2) = score_candidate(tokens, train_x, train_y, snapshot);
        if r2 > best.2 {
            best = (i, expr, r2);
        }
    }
    best
}

/// Evaluates one equation given an explicit train/test split: condition the
/// encoder on (at most 200) training rows, generate candidates, select by
/// training R², and score the chosen candidate on the test rows.
pub fn evaluate_equation(
    snapshot: &PolicySnapshot,
    train: &Dataset,
    test: &Dataset,
    options: &EvalOptions,
) -> Result<EquationRecord, BenchError> {
    options.validate()?;
    let fit_start = Instant::now();
    let (cond_x, cond_y) = conditioning_rows(train, options.seed);
    let embedding = snapshot.encode(cond_x.view(), cond_y.view())?;

    let mut candidates: Vec<Vec<u32>> = Vec::new();
    match options.decode {
        DecodeMode::Greedy => {
            let mut rng = stream(options.seed, &format!("bench/candidates/{}", train.name));
            for g in snapshot.generate(&embedding, DecodeMode::Greedy, &mut rng) {
                candidates.push(g.tokens);
            }
        }
        DecodeMode::Beam { width } => {
            let mut rng = stream(options.seed, &format!("bench/candidates/{}", train.name));
            for g in snapshot.generate(&embedding, DecodeMode::Beam { width }, &mut rng) {
                candidates.push(g.tokens);
            }
        }
        DecodeMode::Sample { temperature } => {
            let mut rng = stream(options.seed, &format!("bench/candidates/{}", train.name));
            for _ in 0..options.samples_per_eq {
                for g in snapshot.generate(
                    &embedding,
                    DecodeMode::Sample { temperature },
                    &mut rng,
                ) {
                    candidates.push(g.tokens);
                }
            }
        }
    }

    let (_, expr, train_r2) = select_candidate(&candidates, &train.x, &train.y, snapshot);
    let fit_seconds = fit_start.elapsed().as_secs_f64();

    let predict_start = Instant::now();
    let (expression, test_r2) = match expr {
        Some(expr) => {
            let result = evaluate(&expr, test.x.view());
            (Some(expr.to_string()), compute_r2(test.y.view(), &result))
        }
        None => (None, -1.0),
    };
    let predict_seconds = predict_start.elapsed().as_secs_f64();

    Ok(EquationRecord {
        name: train.name.clone(),
        expression,
        train_r2,
        test_r2,
        fit_seconds,
        predict_seconds,
    })
}

/// At most `ENCODER_ROW_CAP` training rows to condition the encoder on,
/// subsampled uniformly without replacement when the split is larger.
fn conditioning_rows(train: &Dataset, seed: u64) -> (Array2<f64>, Array1<f64>) {
    let n = train.len();
    if n <= ENCODER_ROW_CAP {
        return (train.x.clone(), train.y.clone());
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, &format!("bench/subsample/{}", train.name));
    for i in 0..ENCODER_ROW_CAP {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    let rows = &order[..ENCODER_ROW_CAP];
    let mut x = Array2::zeros((ENCODER_ROW_CAP, train.dim()));
    let mut y = Array1::zeros(ENCODER_ROW_CAP);
    for (out, &src) in rows.iter().enumerate() {
        x.row_mut(out).assign(&train.x.row(src));
        y[out] = train.y[src];
    }
    (x, y)
}

/// Full protocol over many datasets: split each 75/25, optionally perturb
/// targets with noise, evaluate, and aggregate. Per-equation failures score
/// −1 and never abort the sweep.
pub fn evaluate_model(
    snapshot: &PolicySnapshot,
    datasets: &[Dataset],
    options: &EvalOptions,
) -> Result<Metrics, BenchError> {
    options.validate()?;
    if datasets.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    let records: Result<Vec<EquationRecord>, BenchError> = datasets
        .par_iter()
        .enumerate()
        .map(|(i, dataset)| {
            let (mut train, mut test) = split(dataset, options.train_fraction, options.seed)?;
            if options.noise_train > 0.0 {
                let mut rng = stream_indexed(options.seed, "bench/noise-train", i as u64);
                train.y = inject_noise(train.y.view(), options.noise_train, &mut rng);
            }
            if options.noise_test > 0.0 {
                let mut rng = stream_indexed(options.seed, "bench/noise-test", i as u64);
                test.y = inject_noise(test.y.view(), options.noise_test, &mut rng);
            }
            evaluate_equation(snapshot, &train, &test, options)
        })
        .collect();
    Metrics::from_records(records?)
}

/// How report time fields are written. Pinned zeroes them so repeated runs
/// produce byte-identical files; measured keeps the wall-clock values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingPolicy {
    Pinned,
    Measured,
}

#[derive(Serialize)]
struct Report<'a> {
    version: u32,
    runs: Vec<ReportRun<'a>>,
}

#[derive(Serialize)]
struct ReportRun<'a> {
    name: &'a str,
    mean_r2: f64,
    proportion_gt_099: f64,
    fit_seconds: f64,
    predict_seconds: f64,
    equations: Vec<ReportEquation<'a>>,
}

#[derive(Serialize)]
struct ReportEquation<'a> {
    name: &'a str,
    expression: Option<&'a str>,
    train_r2: f64,
    test_r2: f64,
    fit_seconds: f64,
    predict_seconds: f64,
}

/// Writes `report.json` (full per-equation records) and `summary.csv` (one
/// row per named run) into `dir`. Field order is fixed and floats are
/// formatted to six decimals in the CSV, so identical runs diff clean.
pub fn emit_report(
    runs: &[(String, Metrics)],
    dir: &Path,
    timing: TimingPolicy,
) -> Result<(), BenchError> {
    if runs.is_empty() || runs.iter().all(|(_, m)| m.equations.is_empty()) {
        return Err(BenchError::EmptyReport);
    }
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| BenchError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let time = |t: f64| match timing {
        TimingPolicy::Pinned => 0.0,
        TimingPolicy::Measured => t,
    };

    let report = Report {
        version: REPORT_VERSION,
        runs: runs
            .iter()
            .map(|(name, m)| ReportRun {
                name,
                mean_r2: m.mean_r2,
                proportion_gt_099: m.proportion_gt_099,
                fit_seconds: time(m.fit_seconds),
                predict_seconds: time(m.predict_seconds),
                equations: m
                    .equations
                    .iter()
                    .map(|e| ReportEquation {
                        name: &e.name,
                        expression: e.expression.as_deref(),
                        train_r2: e.train_r2,
                        test_r2: e.test_r2,
                        fit_seconds: time(e.fit_seconds),
                        predict_seconds: time(e.predict_seconds),
                    })
                    .collect(),
            })
            .collect(),
    };
    let json_path = dir.join("report.json");
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    fs::write(&json_path, json).map_err(io_err(&json_path))?;

    let mut csv = String::from("name,mean_r2,proportion_gt_099,fit_seconds,predict_seconds\n");
    for (name, m) in runs {
        writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.6}",
            name,
            m.mean_r2,
            m.proportion_gt_099,
            time(m.fit_seconds),
            time(m.predict_seconds)
        )
        .expect("string write");
    }
    let csv_path = dir.join("summary.csv");
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{tokenize, Vocabulary};
    use crate::model::ModelConfig;
    use std::io::Write as _;

    fn write_csv(content: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("toy.csv");
        let mut f = fs::File::create(&path).expect("create");
        f.write_all(content.as_bytes()).expect("write");
        (dir, path)
    }

    #[test]
    fn load_csv_reads_shape_and_values() {
        let (_dir, path) = write_csv("x0,x1,y\n1,2,3\n4,5,9\n-1,0.5,-0.5\n0,0,0\n");
        let d = load_csv(&path).unwrap();
        assert_eq!(d.name, "toy");
        assert_eq!(d.dim(), 2);
        assert_eq!(d.len(), 4);
        assert_eq!(d.x[[1, 0]], 4.0);
        assert_eq!(d.y[2], -0.5);
    }

    #[test]
    fn load_csv_rejects_malformed_files() {
        let (_dir, path) = write_csv("a,b,y\n1,2,3\n");
        assert!(matches!(load_csv(&path), Err(BenchError::BadHeader { .. })));

        let (_dir, path) = write_csv("x0,y\n1,2\n3,nan\n5,6\n7,8\n");
        match load_csv(&path) {
            Err(BenchError::BadCell { row, column, .. }) => {
                assert_eq!((row, column.as_str()), (3, "y"));
            }
            other => panic!("expected cell error, got {other:?}"),
        }

        let (_dir, path) = write_csv("x0,y\n1,2\n3\n5,6\n7,8\n");
        assert!(matches!(
            load_csv(&path),
            Err(BenchError::RaggedRow { row: 3, .. })
        ));

        let header: String = (0..11).map(|i| format!("x{i},")).collect::<String>() + "y\n";
        let row = "1,".repeat(11) + "1\n";
        let (_dir, path) = write_csv(&(header + &row.repeat(4)));
        assert!(matches!(
            load_csv(&path),
            Err(BenchError::TooManyDims { d: 11, .. })
        ));

        let (_dir, path) = write_csv("x0,y\n1,2\n3,4\n5,6\n");
        assert!(matches!(
            load_csv(&path),
            Err(BenchError::TooFewRows { n: 3, .. })
        ));
    }

    fn line_dataset(n: usize) -> Dataset {
        let x = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64 * 0.1 - 3.0);
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]] + x[[i, 1]]);
        Dataset::new("line", x, y, Some("(x0 + x1)".into())).unwrap()
    }

    #[test]
    fn split_is_disjoint_deterministic_and_sized() {
        let d = line_dataset(100);
        let (train, test) = split(&d, 0.75, 11).unwrap();
        assert_eq!((train.len(), test.len()), (75, 25));
        let (train2, test2) = split(&d, 0.75, 11).unwrap();
        assert_eq!(train.y, train2.y);
        assert_eq!(test.y, test2.y);

        // Every original row appears exactly once across the two splits.
        let mut seen: Vec<f64> = train.y.iter().chain(test.y.iter()).copied().collect();
        let mut orig: Vec<f64> = d.y.to_vec();
        seen.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(seen, orig);

        let tiny = line_dataset(4);
        let (tr, te) = split(&tiny, 0.75, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (3, 1));

        let (shuffled, _) = split(&d, 0.75, 12).unwrap();
        assert_ne!(train.y, shuffled.y, "different seeds should differ");
    }

    #[test]
    fn noise_is_identity_at_zero_and_scales_with_sigma() {
        let mut rng = stream(3, "noise-test");
        let y = Array1::from_shape_fn(10_000, |i| (i as f64 * 0.37).sin() * 5.0 + 2.0);
        let same = inject_noise(y.view(), 0.0, &mut rng);
        for (a, b) in y.iter().zip(same.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let n = y.len() as f64;
        let mean = y.sum() / n;
        let std = (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        for sigma in [0.001, 0.01, 0.1] {
            let noisy = inject_noise(y.view(), sigma, &mut rng);
            let diff: Vec<f64> = noisy.iter().zip(y.iter()).map(|(a, b)| a - b).collect();
            let dm = diff.iter().sum::<f64>() / n;
            let dstd = (diff.iter().map(|v| (v - dm) * (v - dm)).sum::<f64>() / n).sqrt();
            let target = sigma * std;
            assert!(
                (dstd - target).abs() / target < 0.05,
                "sigma {sigma}: injected std {dstd} vs target {target}"
            );
        }

        let flat = Array1::from_elem(100, 7.0);
        let noisy = inject_noise(flat.view(), 0.5, &mut rng);
        assert_eq!(noisy, flat, "zero spread means zero noise");
    }

    fn tiny_snapshot(seed: u64) -> PolicySnapshot {
        let config = ModelConfig {
            width: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            memory_slots: 2,
            vocab_size: crate::expr::vocab::VOCAB_SIZE,
            max_seq_len: 24,
        };
        PolicySnapshot::init(config, seed).expect("init")
    }

    fn tokens_of(expr: &Expression) -> Vec<u32> {
        let vocab = Vocabulary::standard();
        tokenize(expr, &vocab).expect("tokenize").ids().to_vec()
    }

    fn var_pair(op: crate::expr::BinaryOp) -> Expression {
        Expression::Binary(
            op,
            Box::new(Expression::Variable(0)),
            Box::new(Expression::Variable(1)),
        )
    }

    #[test]
    fn selection_prefers_the_ground_truth_candidate() {
        use crate::expr::BinaryOp;
        let d = line_dataset(40);
        let snapshot = tiny_snapshot(5);
        let truth = tokens_of(&var_pair(BinaryOp::Add));
        let junk = vec![1u32, 3, 2];
        let wrong = tokens_of(&var_pair(BinaryOp::Mul));
        let candidates = vec![junk, wrong, truth];
        let (idx, expr, r2) = select_candidate(&candidates, &d.x, &d.y, &snapshot);
        assert_eq!(idx, 2);
        assert_eq!(expr.unwrap().to_string(), "(x0 + x1)");
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_candidate_gives_perfect_test_r2() {
        let d = line_dataset(40);
        let snapshot = tiny_snapshot(5);
        let (train, test) = split(&d, 0.75, 1).unwrap();
        let truth = tokens_of(&var_pair(crate::expr::BinaryOp::Add));
        let (_, expr, _) = select_candidate(&[truth], &train.x, &train.y, &snapshot);
        let result = evaluate(&expr.unwrap(), test.x.view());
        let test_r2 = compute_r2(test.y.view(), &result);
        assert!((test_r2 - 1.0).abs() < 1e-12);
        let metrics = Metrics::from_records(vec![EquationRecord {
            name: "line".into(),
            expression: Some("(x0 + x1)".into()),
            train_r2: 1.0,
            test_r2,
            fit_seconds: 0.1,
            predict_seconds: 0.01,
        }])
        .unwrap();
        assert_eq!(metrics.proportion_gt_099, 1.0);
    }

    #[test]
    fn selection_never_reads_test_rows() {
        let d = line_dataset(80);
        let snapshot = tiny_snapshot(9);
        let (train, test) = split(&d, 0.75, 2).unwrap();
        let options = EvalOptions {
            samples_per_eq: 4,
            seed: 31,
            ..EvalOptions::default()
        };
        let baseline = evaluate_equation(&snapshot, &train, &test, &options).unwrap();

        // Shuffling the test targets must leave the chosen expression and
        // training score untouched; only the test score may move.
        let mut shuffled = test.clone();
        let perm: Vec<usize> = (0..test.len()).rev().collect();
        shuffled.y = Array1::from_shape_fn(test.len(), |i| test.y[perm[i]]);
        let moved = evaluate_equation(&snapshot, &train, &shuffled, &options).unwrap();
        assert_eq!(baseline.expression, moved.expression);
        assert_eq!(baseline.train_r2, moved.train_r2);
    }

    #[test]
    fn degenerate_policy_scores_minus_one() {
        // A freshly initialized tiny policy emits junk; every candidate
        // fails, the sweep continues, and aggregates show the failure.
        let d = line_dataset(40);
        let snapshot = tiny_snapshot(5);
        let options = EvalOptions {
            samples_per_eq: 2,
            seed: 4,
            ..EvalOptions::default()
        };
        let metrics = evaluate_model(&snapshot, &[d], &options).unwrap();
        assert_eq!(metrics.equations.len(), 1);
        if metrics.equations[0].expression.is_none() {
            assert_eq!(metrics.mean_r2, -1.0);
            assert_eq!(metrics.proportion_gt_099, 0.0);
        }
    }

    #[test]
    fn conditioning_caps_encoder_rows() {
        let d = line_dataset(400);
        let (train, _) = split(&d, 0.75, 6).unwrap();
        assert_eq!(train.len(), 300);
        let (cx, cy) = conditioning_rows(&train, 6);
        assert_eq!(cx.nrows(), ENCODER_ROW_CAP);
        assert_eq!(cy.len(), ENCODER_ROW_CAP);
        // Subsampled rows come from the training split.
        for i in 0..cx.nrows() {
            let found = (0..train.len())
                .any(|j| train.x.row(j) == cx.row(i) && train.y[j] == cy[i]);
            assert!(found, "row {i} not in the training split");
        }
        let (cx2, _) = conditioning_rows(&train, 6);
        assert_eq!(cx, cx2, "subsample should be seeded");
    }

    #[test]
    fn reports_are_deterministic_and_fixed_format() {
        let metrics = Metrics::from_records(vec![
            EquationRecord {
                name: "b".into(),
                expression: Some("(x0 + x1)".into()),
                train_r2: 0.999,
                test_r2: 0.9995,
                fit_seconds: 1.25,
                predict_seconds: 0.5,
            },
            EquationRecord {
                name: "a".into(),
                expression: None,
                train_r2: -1.0,
                test_r2: -1.0,
                fit_seconds: 0.75,
                predict_seconds: 0.25,
            },
        ])
        .unwrap();
        assert_eq!(metrics.equations[0].name, "a", "records sorted by name");
        assert_eq!(metrics.proportion_gt_099, 0.5);

        let dir = tempfile::tempdir().expect("tempdir");
        let runs = vec![("sample-k16".to_string(), metrics)];
        emit_report(&runs, dir.path(), TimingPolicy::Pinned).unwrap();
        let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(
            csv,
            "name,mean_r2,proportion_gt_099,fit_seconds,predict_seconds\n\
             sample-k16,-0.000250,0.500000,0.000000,0.000000\n"
        );
        let json1 = fs::read(dir.path().join("report.json")).unwrap();

        let dir2 = tempfile::tempdir().expect("tempdir");
        emit_report(&runs, dir2.path(), TimingPolicy::Pinned).unwrap();
        let json2 = fs::read(dir2.path().join("report.json")).unwrap();
        assert_eq!(json1, json2, "repeat emission must be byte-identical");

        let dir3 = tempfile::tempdir().expect("tempdir");
        emit_report(&runs, dir3.path(), TimingPolicy::Measured).unwrap();
        let csv3 = fs::read_to_string(dir3.path().join("summary.csv")).unwrap();
        assert!(csv3.contains("2.000000"), "measured fit time kept: {csv3}");

        assert!(matches!(
            emit_report(&[], dir.path(), TimingPolicy::Pinned),
            Err(BenchError::EmptyReport)
        ));
    }

    #[test]
    fn proportion_formats_to_six_decimals() {
        let records: Vec<EquationRecord> = (0..7)
            .map(|i| EquationRecord {
                name: format!("eq{i}"),
                expression: Some("x0".into()),
                train_r2: 1.0,
                test_r2: if i < 6 { 1.0 } else { 0.0 },
                fit_seconds: 0.0,
                predict_seconds: 0.0,
            })
            .collect();
        let metrics = Metrics::from_records(records).unwrap();
        let dir = tempfile::tempdir().expect("tempdir");
        emit_report(
            &[("run".into(), metrics)],
            dir.path(),
            TimingPolicy::Pinned,
        )
        .unwrap();
        let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(csv.contains("0.857143"), "six-decimal proportion: {csv}");
    }
}
