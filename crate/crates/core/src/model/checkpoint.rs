//! Checkpoint file format: one JSON header line (version, architecture,
//! vocabulary hash, parameter manifest), then raw little-endian f64 blocks
//! in manifest order.
//!
//! Parameters are stored at full f64 width so that load(save(s)) reproduces
//! the model bit-exactly; anything narrower would silently perturb restarted
//! runs and break determinism guarantees downstream.

use super::net::{manifest, ModelConfig};
use super::params::ParamStore;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint header in {path}: {message}")]
    Header { path: PathBuf, message: String },
    #[error("checkpoint version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint vocabulary hash {found} does not match {expected}")]
    VocabHash { found: String, expected: String },
    #[error("checkpoint manifest entry {position}: found {found}, expected {expected}")]
    Manifest {
        position: usize,
        found: String,
        expected: String,
    },
    #[error("checkpoint truncated while reading parameter {name}")]
    Truncated { name: String },
    #[error("checkpoint has {extra} bytes of trailing data")]
    TrailingData { extra: u64 },
    #[error("checkpoint architecture invalid: {0}")]
    Config(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    vocab_hash: String,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize, PartialEq, Eq)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save(
    path: &Path,
    config: &ModelConfig,
    vocab_hash: &str,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    let params: Vec<ParamMeta> = (0..store.len())
        .map(|i| {
            let (rows, cols) = store.value(i).dim();
            ParamMeta {
                name: store.name(i).to_string(),
                rows,
                cols,
            }
        })
        .collect();
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        vocab_hash: vocab_hash.to_string(),
        params,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    serde_json::to_writer(&mut w, &header).map_err(|e| CheckpointError::Header {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    for i in 0..store.len() {
        for &v in store.value(i).iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Loads and fully verifies a checkpoint: format version, vocabulary hash,
/// architecture validity, and that the stored manifest is exactly the one
/// this build derives from the architecture.
pub fn load(path: &Path, expected_hash: &str) -> Result<(ModelConfig, ParamStore), CheckpointError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte).map_err(io_err(path))? {
            0 => {
                return Err(CheckpointError::Header {
                    path: path.to_path_buf(),
                    message: "missing newline after header".into(),
                })
            }
            _ if byte[0] == b'\n' => break,
            _ => header_bytes.push(byte[0]),
        }
    }
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| CheckpointError::Header {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if header.vocab_hash != expected_hash {
        return Err(CheckpointError::VocabHash {
            found: header.vocab_hash,
            expected: expected_hash.to_string(),
        });
    }
    header.config.validate().map_err(CheckpointError::Config)?;
    let expected = manifest(&header.config);
    if header.params.len() != expected.len() {
        return Err(CheckpointError::Manifest {
            position: header.params.len().min(expected.len()),
            found: format!("{} entries", header.params.len()),
            expected: format!("{} entries", expected.len()),
        });
    }
    for (pos, (meta, (name, rows, cols, _))) in
        header.params.iter().zip(&expected).enumerate()
    {
        if meta.name != *name || meta.rows != *rows || meta.cols != *cols {
            return Err(CheckpointError::Manifest {
                position: pos,
                found: format!("{} [{}x{}]", meta.name, meta.rows, meta.cols),
                expected: format!("{name} [{rows}x{cols}]"),
            });
        }
    }

    let mut store = ParamStore::new();
    for meta in &header.params {
        let n = meta.rows * meta.cols;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                CheckpointError::Truncated {
                    name: meta.name.clone(),
                }
            } else {
                io_err(path)(e)
            }
        })?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let arr = Array2::from_shape_vec((meta.rows, meta.cols), values)
            .expect("shape matches element count");
        store.add(&meta.name, arr);
    }
    let mut extra = 0u64;
    let mut sink = [0u8; 4096];
    loop {
        let n = r.read(&mut sink).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        extra += n as u64;
    }
    if extra > 0 {
        return Err(CheckpointError::TrailingData { extra });
    }
    Ok((header.config, store))
}
