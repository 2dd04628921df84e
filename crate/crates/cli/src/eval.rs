//! `reel eval`: benchmark evaluation. Each decode mode and noise level
//! becomes one summary row, mirroring a Table-1-style sweep.

use crate::config::{write_resolved, FileConfig};
use crate::{CliError, CmdResult};
use anyhow::{anyhow, Context};
use clap::Args;
use reel_core::bench::{emit_report, evaluate_model, load_csv, Dataset, EvalOptions};
use reel_core::{DecodeMode, Metrics, PolicySnapshot, TimingPolicy};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Dataset CSV file or directory of CSVs; repeatable.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Report directory for report.json and summary.csv.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; the `eval` section applies.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated decode modes: greedy, sample, beam.
    #[arg(long)]
    decode: Option<String>,
    /// Candidates per equation for sampled decoding.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Comma-separated training-noise levels; one summary row each.
    #[arg(long)]
    noise_train: Option<String>,
    /// Comma-separated test-noise levels; one summary row each.
    #[arg(long)]
    noise_test: Option<String>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// `pinned` zeroes time fields for byte-stable reports; `measured`
    /// keeps wall-clock values.
    #[arg(long)]
    timing: Option<String>,
}

#[derive(Serialize)]
struct Resolved {
    command: &'static str,
    model: String,
    data: Vec<String>,
    out: String,
    timing: TimingPolicy,
    noise_train_levels: Vec<f64>,
    noise_test_levels: Vec<f64>,
    decode_modes: Vec<DecodeMode>,
    eval: EvalOptions,
}

pub fn run(args: EvalArgs) -> CmdResult {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut base: EvalOptions = file.section("eval", true)?;
    if let Some(v) = args.k {
        base.samples_per_eq = v;
    }
    if let Some(v) = args.train_fraction {
        base.train_fraction = v;
    }
    if let Some(v) = args.seed {
        base.seed = v;
    }
    base.validate().map_err(CliError::usage)?;

    let decode_modes = match &args.decode {
        Some(list) => parse_decode_list(list, &args, &base)?,
        None => vec![base.decode],
    };
    let noise_train = parse_noise_list(args.noise_train.as_deref(), base.noise_train)?;
    let noise_test = parse_noise_list(args.noise_test.as_deref(), base.noise_test)?;
    let timing = match args.timing.as_deref() {
        None | Some("pinned") => TimingPolicy::Pinned,
        Some("measured") => TimingPolicy::Measured,
        Some(other) => {
            return Err(CliError::usage(anyhow!(
                "--timing must be `pinned` or `measured`, got `{other}`"
            )))
        }
    };

    let snapshot = PolicySnapshot::load(&args.model).map_err(CliError::usage)?;
    let datasets = collect_datasets(&args.data)?;
    if datasets.is_empty() {
        return Err(CliError::usage(anyhow!("no datasets found under --data paths")));
    }

    let mut runs: Vec<(String, Metrics)> = Vec::new();
    for &mode in &decode_modes {
        for &sigma_train in &noise_train {
            for &sigma_test in &noise_test {
                let options = EvalOptions {
                    decode: mode,
                    noise_train: sigma_train,
                    noise_test: sigma_test,
                    ..base.clone()
                };
                let label = run_label(
                    mode,
                    base.samples_per_eq,
                    sigma_train,
                    noise_train.len() > 1,
                    sigma_test,
                    noise_test.len() > 1,
                );
                let metrics =
                    evaluate_model(&snapshot, &datasets, &options).map_err(CliError::runtime)?;
                println!(
                    "{label}: mean R2 {:.6}, proportion > 0.99 {:.6} over {} equations",
                    metrics.mean_r2,
                    metrics.proportion_gt_099,
                    metrics.equations.len()
                );
                runs.push((label, metrics));
            }
        }
    }

    emit_report(&runs, &args.out, timing).map_err(CliError::runtime)?;
    write_resolved(
        &args.out,
        &Resolved {
            command: "eval",
            model: args.model.display().to_string(),
            data: args.data.iter().map(|p| p.display().to_string()).collect(),
            out: args.out.display().to_string(),
            timing,
            noise_train_levels: noise_train,
            noise_test_levels: noise_test,
            decode_modes,
            eval: base,
        },
    )?;
    println!("wrote report.json and summary.csv to {}", args.out.display());
    Ok(())
}

fn parse_decode_list(
    list: &str,
    args: &EvalArgs,
    base: &EvalOptions,
) -> Result<Vec<DecodeMode>, CliError> {
    let base_temperature = match base.decode {
        DecodeMode::Sample { temperature } => temperature,
        _ => 1.0,
    };
    let base_width = match base.decode {
        DecodeMode::Beam { width } => width,
        _ => 4,
    };
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|token| match token {
            "greedy" => Ok(DecodeMode::Greedy),
            "sample" => Ok(DecodeMode::Sample {
                temperature: args.temperature.unwrap_or(base_temperature),
            }),
            "beam" => Ok(DecodeMode::Beam {
                width: args.beam_width.unwrap_or(base_width),
            }),
            other => Err(CliError::usage(anyhow!(
                "--decode entries must be greedy, sample, or beam; got `{other}`"
            ))),
        })
        .collect()
}

fn parse_noise_list(flag: Option<&str>, base: f64) -> Result<Vec<f64>, CliError> {
    let Some(list) = flag else { return Ok(vec![base]) };
    let levels: Result<Vec<f64>, _> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse::<f64>)
        .collect();
    let levels = levels
        .map_err(|e| CliError::usage(anyhow!("noise levels must be numbers: {e}")))?;
    if levels.is_empty() {
        return Err(CliError::usage(anyhow!("empty noise level list")));
    }
    if let Some(bad) = levels.iter().find(|&&s| s < 0.0 || !s.is_finite()) {
        return Err(CliError::usage(anyhow!("noise level {bad} must be non-negative")));
    }
    Ok(levels)
}

fn run_label(
    mode: DecodeMode,
    k: usize,
    sigma_train: f64,
    train_sweep: bool,
    sigma_test: f64,
    test_sweep: bool,
) -> String {
    let mut label = match mode {
        DecodeMode::Greedy => "greedy".to_string(),
        DecodeMode::Sample { .. } => format!("sample-k{k}"),
        DecodeMode::Beam { width } => format!("beam-w{width}"),
    };
    if train_sweep || sigma_train > 0.0 {
        label.push_str(&format!("+ntrain{sigma_train}"));
    }
    if test_sweep || sigma_test > 0.0 {
        label.push_str(&format!("+ntest{sigma_test}"));
    }
    label
}

fn collect_datasets(paths: &[PathBuf]) -> Result<Vec<Dataset>, CliError> {
    let mut files: Vec<PathBuf> = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(CliError::usage)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(path.clone());
        }
    }
    files
        .iter()
        .map(|p: &PathBuf| load_csv(Path::new(p)).map_err(CliError::usage))
        .collect()
}
