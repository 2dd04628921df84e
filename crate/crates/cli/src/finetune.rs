//! `reel finetune`: reinforcement adaptation of a pretrained checkpoint to
//! one dataset. The dataset is split 75/25 by default; only the training
//! rows drive finetuning, so the test rows stay clean for evaluation.

use crate::config::{out_dir, write_resolved, FileConfig};
use crate::{CliError, CmdResult};
use anyhow::{anyhow, Context};
use clap::Args;
use reel_core::bench::{inject_noise, load_csv, split};
use reel_core::reel::{run_reel, RolloutDecode};
use reel_core::rng::stream_indexed;
use reel_core::{FinetuneConfig, PolicySnapshot, Vocabulary};
use serde::Serialize;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

#[derive(Args)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint to start from.
    #[arg(long)]
    model: PathBuf,
    /// Dataset CSV with header x0,...,x{d-1},y.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path; the training log lives beside it.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; the `finetune` section applies.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of trajectory subsets sampled from the training rows.
    #[arg(long)]
    subsets: Option<usize>,
    #[arg(long)]
    subset_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Clip width ε of the surrogate objective.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Weight β of the KL stability term.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Rollout decoding: sample or beam.
    #[arg(long)]
    decode: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Refresh the reference policy every this many epochs; 0 keeps it
    /// frozen at the pretrained snapshot.
    #[arg(long)]
    refresh_old_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of rows used for training; the rest are held out.
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Gaussian noise level added to training targets before finetuning.
    #[arg(long)]
    noise_train: Option<f64>,
}

#[derive(Serialize)]
struct Resolved {
    command: &'static str,
    model: String,
    data: String,
    out: String,
    train_fraction: f64,
    noise_train: f64,
    finetune: FinetuneConfig,
}

pub fn run(args: FinetuneArgs) -> CmdResult {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut cfg: FinetuneConfig = file.section("finetune", true)?;
    if let Some(v) = args.subsets {
        cfg.n_subsets = v;
    }
    if let Some(v) = args.subset_size {
        cfg.subset_size = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.epsilon {
        cfg.clip = v;
    }
    if let Some(v) = args.beta {
        cfg.kl_coefficient = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = &args.decode {
        cfg.decode_mode = parse_rollout_decode(v)?;
    }
    if let Some(v) = args.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = args.beam_width {
        cfg.beam_width = v;
    }
    if let Some(v) = args.refresh_old_every {
        cfg.refresh_old_every = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(CliError::usage)?;
    let train_fraction = args.train_fraction.unwrap_or(0.75);
    let noise_train = args.noise_train.unwrap_or(0.0);
    if noise_train < 0.0 {
        return Err(CliError::usage(anyhow!("--noise-train must be non-negative")));
    }

    let snapshot = PolicySnapshot::load(&args.model).map_err(CliError::usage)?;
    let dataset = load_csv(&args.data).map_err(CliError::usage)?;
    let (mut train, _test) = split(&dataset, train_fraction, cfg.seed).map_err(CliError::usage)?;
    if noise_train > 0.0 {
        let mut rng = stream_indexed(cfg.seed, "bench/noise-train", 0);
        train.y = inject_noise(train.y.view(), noise_train, &mut rng);
    }

    let dir = out_dir(&args.out);
    fs::create_dir_all(dir)
        .context("creating output directory")
        .map_err(CliError::runtime)?;
    write_resolved(
        dir,
        &Resolved {
            command: "finetune",
            model: args.model.display().to_string(),
            data: args.data.display().to_string(),
            out: args.out.display().to_string(),
            train_fraction,
            noise_train,
            finetune: cfg.clone(),
        },
    )?;

    let outcome = run_reel(&snapshot, train.x.view(), train.y.view(), &cfg)
        .map_err(CliError::usage)?;

    let log_path = dir.join("finetune_log.jsonl");
    let mut log = fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))
        .map_err(CliError::runtime)?;
    for diag in &outcome.log {
        let line = serde_json::to_string(diag).expect("log line");
        writeln!(log, "{line}").context("writing log").map_err(CliError::runtime)?;
    }
    outcome.snapshot.save(&args.out).map_err(CliError::runtime)?;
    Vocabulary::standard()
        .write_json(&dir.join("vocab.json"))
        .context("writing vocab.json")
        .map_err(CliError::runtime)?;

    if let Some(e) = outcome.error {
        return Err(CliError::runtime(anyhow::Error::new(e).context(format!(
            "finetuning aborted; last good snapshot saved to {}",
            args.out.display()
        ))));
    }
    if let Some(last) = outcome.log.last() {
        println!(
            "finetuned {} steps: mean reward {:.4}, valid rate {:.2}, saved to {}",
            outcome.log.len(),
            last.mean_reward,
            last.valid_rate,
            args.out.display()
        );
    } else {
        println!("no training steps requested; snapshot copied to {}", args.out.display());
    }
    Ok(())
}

fn parse_rollout_decode(text: &str) -> Result<RolloutDecode, CliError> {
    match text {
        "sample" => Ok(RolloutDecode::Sample),
        "beam" => Ok(RolloutDecode::Beam),
        other => Err(CliError::usage(anyhow!(
            "--decode must be `sample` or `beam`, got `{other}`"
        ))),
    }
}
