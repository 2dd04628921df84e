//! `reel pretrain`: teacher-forced cross-entropy training on a corpus, with
//! periodic checkpointing and resumption that keeps step numbering
//! contiguous.

use crate::config::{out_dir, write_resolved, FileConfig};
use crate::{CliError, CmdResult};
use anyhow::{anyhow, bail, Context};
use clap::Args;
use rand::Rng;
use reel_core::datagen::{read_corpus, Triplet};
use reel_core::model::optim::AdamW;
use reel_core::rng::stream;
use reel_core::{ModelConfig, PolicySnapshot, Vocabulary};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Args)]
pub struct PretrainArgs {
    /// Corpus file produced by gen-data.
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint path; the log and trainer state live beside it.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; sections `pretrain` and `model` apply.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total epochs (resume continues toward this count).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of the corpus held out for the final token accuracy.
    #[arg(long)]
    holdout: Option<f64>,
    /// Checkpoint every this many steps; 0 checkpoints only at the end.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the checkpoint and trainer state at --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 8,
            batch_size: 32,
            learning_rate: 1e-3,
            holdout_fraction: 0.05,
            checkpoint_every: 200,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    fn validate(&self) -> Result<(), CliError> {
        let fail = |m: &str| Err(CliError::usage(anyhow!("pretrain config: {m}")));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return fail("holdout_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

/// Sidecar state that makes `--resume` deterministic: the next global step
/// plus the quantities that fix how steps map onto epochs and batches.
#[derive(Debug, Serialize, Deserialize)]
struct TrainerState {
    version: u32,
    next_step: u64,
    batch_size: usize,
    train_len: usize,
    holdout_len: usize,
    seed: u64,
}

#[derive(Serialize)]
struct Resolved {
    command: &'static str,
    corpus: String,
    out: String,
    pretrain: PretrainConfig,
    model: ModelConfig,
}

#[derive(Serialize)]
struct LogLine {
    step: u64,
    epoch: usize,
    loss: f64,
}

pub fn run(args: PretrainArgs) -> CmdResult {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut cfg: PretrainConfig = file.section("pretrain", true)?;
    let model_cfg: ModelConfig = file.section("model", false)?;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.holdout {
        cfg.holdout_fraction = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    model_cfg
        .validate()
        .map_err(|m| CliError::usage(anyhow!("model config: {m}")))?;

    let vocab = Vocabulary::standard();
    let corpus = read_corpus(&args.corpus, &vocab).map_err(CliError::usage)?;
    let n = corpus.triplets.len();
    let holdout_len = (cfg.holdout_fraction * n as f64).floor() as usize;
    let train_len = n - holdout_len;
    if train_len == 0 {
        return Err(CliError::usage(anyhow!(
            "holdout fraction {} leaves no training triplets",
            cfg.holdout_fraction
        )));
    }
    let (train, holdout) = corpus.triplets.split_at(train_len);

    let state_path = args.out.with_extension("state.json");
    let log_path = out_dir(&args.out).join("pretrain_log.jsonl");
    let (mut snapshot, start_step) = if args.resume {
        let snapshot = PolicySnapshot::load(&args.out).map_err(CliError::usage)?;
        let state = read_state(&state_path)?;
        if (state.batch_size, state.train_len, state.holdout_len, state.seed)
            != (cfg.batch_size, train_len, holdout_len, cfg.seed)
        {
            return Err(CliError::usage(anyhow!(
                "resume settings differ from the interrupted run; \
                 keep batch_size, holdout, seed, and corpus identical"
            )));
        }
        (snapshot, state.next_step)
    } else {
        let snapshot =
            PolicySnapshot::init(model_cfg.clone(), cfg.seed).map_err(CliError::usage)?;
        (snapshot, 0)
    };

    fs::create_dir_all(out_dir(&args.out))
        .context("creating output directory")
        .map_err(CliError::runtime)?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(args.resume)
        .truncate(!args.resume)
        .write(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))
        .map_err(CliError::runtime)?;

    let steps_per_epoch = train_len.div_ceil(cfg.batch_size) as u64;
    let mut optimizer = AdamW::new(snapshot.params(), cfg.learning_rate);
    let mut step = start_step;
    let save = |snapshot: &PolicySnapshot, next_step: u64| -> CmdResult {
        snapshot.save(&args.out).map_err(CliError::runtime)?;
        let state = TrainerState {
            version: 1,
            next_step,
            batch_size: cfg.batch_size,
            train_len,
            holdout_len,
            seed: cfg.seed,
        };
        let text = serde_json::to_string_pretty(&state).expect("state serializes");
        fs::write(&state_path, text + "\n")
            .with_context(|| format!("writing {}", state_path.display()))
            .map_err(CliError::runtime)
    };

    let start_epoch = (start_step / steps_per_epoch) as usize;
    let skip_batches = (start_step % steps_per_epoch) as usize;
    for epoch in start_epoch..cfg.epochs {
        let order = shuffled_indices(train_len, cfg.seed, epoch);
        let skip = if epoch == start_epoch { skip_batches } else { 0 };
        for chunk in order.chunks(cfg.batch_size).skip(skip) {
            let batch: Vec<Triplet> = chunk.iter().map(|&i| train[i].clone()).collect();
            let loss = match snapshot.pretrain_step(&batch, &mut optimizer) {
                Ok(loss) => loss,
                Err(e) => {
                    // The failed step left parameters untouched; keep the
                    // last good snapshot reachable for resumption.
                    save(&snapshot, step)?;
                    return Err(CliError::runtime(
                        anyhow::Error::new(e).context(format!("pretraining step {step}")),
                    ));
                }
            };
            let line = serde_json::to_string(&LogLine { step, epoch, loss }).expect("log line");
            writeln!(log, "{line}").context("writing log").map_err(CliError::runtime)?;
            step += 1;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0 {
                save(&snapshot, step)?;
            }
        }
    }
    save(&snapshot, step)?;

    vocab
        .write_json(&out_dir(&args.out).join("vocab.json"))
        .context("writing vocab.json")
        .map_err(CliError::runtime)?;
    write_resolved(
        out_dir(&args.out),
        &Resolved {
            command: "pretrain",
            corpus: args.corpus.display().to_string(),
            out: args.out.display().to_string(),
            pretrain: cfg,
            model: snapshot.config().clone(),
        },
    )?;

    if holdout.is_empty() {
        println!("held-out token accuracy: n/a (no held-out triplets)");
    } else {
        let accuracy = token_accuracy(&snapshot, holdout).map_err(CliError::runtime)?;
        println!("held-out token accuracy: {accuracy:.4}");
    }
    println!("saved checkpoint to {} after {step} steps", args.out.display());
    Ok(())
}

fn read_state(path: &Path) -> Result<TrainerState, CliError> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading trainer state {}; nothing to resume", path.display()))
        .map_err(CliError::usage)?;
    let state: TrainerState = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(CliError::usage)?;
    if state.version != 1 {
        return Err(CliError::usage(anyhow!(
            "trainer state version {} not supported",
            state.version
        )));
    }
    Ok(state)
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, &format!("pretrain/shuffle/{epoch}"));
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order
}

/// Teacher-forced argmax accuracy over every generated-position token of the
/// held-out triplets.
fn token_accuracy(snapshot: &PolicySnapshot, holdout: &[Triplet]) -> anyhow::Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for triplet in holdout {
        let embedding = snapshot.encode(triplet.x.view(), triplet.y.view())?;
        let mut decoder = snapshot.decoder(&embedding);
        let ids = triplet.tokens.ids();
        for &target in &ids[1..] {
            let dist = decoder.distribution();
            let mut best = 0usize;
            for (i, &p) in dist.iter().enumerate() {
                if p > dist[best] {
                    best = i;
                }
            }
            if best == target as usize {
                hits += 1;
            }
            decoder.push(target);
        }
        total += ids.len() - 1;
    }
    if total == 0 {
        bail!("held-out triplets contain no tokens");
    }
    Ok(hits as f64 / total as f64)
}
