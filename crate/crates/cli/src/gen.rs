//! `reel gen-data`: synthetic corpus generation.

use crate::config::{out_dir, write_resolved, FileConfig};
use crate::{CliError, CmdResult};
use anyhow::Context;
use clap::Args;
use reel_core::datagen::{generate_corpus, write_corpus, GenConfig};
use reel_core::Vocabulary;
use serde::Serialize;
use std::path::PathBuf;

#[derive(Args)]
pub struct GenArgs {
    /// Output corpus file (JSON lines, manifest first).
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; the `gen` section mirrors the corpus config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of accepted triplets.
    #[arg(long)]
    n: Option<usize>,
    /// Smallest per-triplet input dimension.
    #[arg(long)]
    min_dim: Option<usize>,
    /// Largest per-triplet input dimension (at most 10).
    #[arg(long)]
    max_dim: Option<usize>,
    /// Rows per triplet (at most 200).
    #[arg(long)]
    points: Option<usize>,
    /// Maximum formula tree depth.
    #[arg(long)]
    max_depth: Option<usize>,
    /// Probability that a leaf is a constant rather than a variable.
    #[arg(long)]
    constant_prob: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct Resolved {
    command: &'static str,
    out: String,
    gen: GenConfig,
}

pub fn run(args: GenArgs) -> CmdResult {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut cfg: GenConfig = file.section("gen", true)?;
    if let Some(n) = args.n {
        cfg.n_triplets = n;
    }
    if let Some(lo) = args.min_dim {
        cfg.dim_range[0] = lo;
    }
    if let Some(hi) = args.max_dim {
        cfg.dim_range[1] = hi;
    }
    if let Some(p) = args.points {
        cfg.points_per_triplet = p;
    }
    if let Some(d) = args.max_depth {
        cfg.max_depth = d;
    }
    if let Some(p) = args.constant_prob {
        cfg.constant_prob = p;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }

    let vocab = Vocabulary::standard();
    let corpus = generate_corpus(&cfg, &vocab).map_err(CliError::usage)?;
    let dir = out_dir(&args.out);
    std::fs::create_dir_all(dir)
        .context("creating output directory")
        .map_err(CliError::runtime)?;
    write_corpus(&corpus, &args.out).map_err(CliError::runtime)?;
    vocab
        .write_json(&dir.join("vocab.json"))
        .context("writing vocab.json")
        .map_err(CliError::runtime)?;
    write_resolved(
        dir,
        &Resolved {
            command: "gen-data",
            out: args.out.display().to_string(),
            gen: cfg,
        },
    )?;
    println!(
        "wrote {} triplets to {} ({} rejected draws)",
        corpus.triplets.len(),
        args.out.display(),
        corpus.rejected
    );
    Ok(())
}
