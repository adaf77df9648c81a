//! Binary checkpoint container for model weights.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! bytes 0..4    magic "VFCK"
//! bytes 4..8    format version (u32)
//! bytes 8..16   header length in bytes (u64)
//! ...           JSON header: model config, free-form metadata, tensor table
//! ...           payload: all tensors back to back as f32 values
//! ```
//!
//! The tensor table maps each parameter name to its shape and element offset
//! into the payload, so files remain loadable when the table order changes.
//! Weights are stored at f32 precision; loading widens back to the f64 used
//! in memory, so a save/load round trip quantizes to f32.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Arr;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

/// File signature identifying the checkpoint container.
pub const MAGIC: [u8; 4] = *b"VFCK";
/// Current container format version.
pub const VERSION: u32 = 1;

/// One entry in the tensor table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, counted in f32 elements (not bytes).
    pub offset: u64,
}

impl TensorEntry {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// JSON header stored between the fixed prelude and the weight payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Architecture record: dimensions, grid geometry and ablation flags.
    pub config: ModelConfig,
    /// Free-form annotations (training stage, epoch, seeds, ...).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

fn io_at(path: &Path, source: std::io::Error) -> Error {
    Error::io(path, source)
}

/// Serializes every model parameter (trainable weights and normalization
/// buffers alike) into a checkpoint file at `path`.
pub fn save_model(
    path: impl AsRef<Path>,
    model: &Model,
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let path = path.as_ref();
    let params = model.all_params();
    let mut seen = HashSet::new();
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for p in &params {
        if !seen.insert(p.name.clone()) {
            return Err(Error::Checkpoint(format!(
                "duplicate parameter name '{}' while saving",
                p.name
            )));
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.len() as u64;
    }
    let header = CheckpointHeader {
        config: model.cfg.clone(),
        meta,
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

    let file = File::create(path).map_err(|e| io_at(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC).map_err(|e| io_at(path, e))?;
    w.write_all(&VERSION.to_le_bytes())
        .map_err(|e| io_at(path, e))?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(|e| io_at(path, e))?;
    w.write_all(&header_json).map_err(|e| io_at(path, e))?;
    for p in &params {
        for &v in p.value.iter() {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| io_at(path, e))?;
        }
    }
    w.flush().map_err(|e| io_at(path, e))?;
    Ok(())
}

/// Reads and validates the prelude + JSON header, leaving the reader
/// positioned at the start of the payload.
fn read_header_from(path: &Path, r: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_at(path, e))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:02x?}, expected {MAGIC:02x?}",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|e| io_at(path, e))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version} (this build reads {VERSION})",
            path.display()
        )));
    }
    let mut long = [0u8; 8];
    r.read_exact(&mut long).map_err(|e| io_at(path, e))?;
    let header_len = u64::from_le_bytes(long) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(|e| io_at(path, e))?;
    serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("{}: malformed header: {e}", path.display())))
}

/// Reads only the header of a checkpoint (config, metadata, tensor table).
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let file = open_checkpoint(path)?;
    let mut r = BufReader::new(file);
    read_header_from(path, &mut r)
}

fn open_checkpoint(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::config(format!("checkpoint not found at {}", path.display()))
        } else {
            io_at(path, e)
        }
    })
}

/// Rebuilds a model from a checkpoint: the architecture comes from the stored
/// config, then every parameter is filled in by name from the payload.
///
/// Returns the model together with the stored metadata map. A missing file is
/// reported as a configuration error; structural problems (missing tensors,
/// shape mismatches, short payload) are checkpoint errors.
pub fn load_model(
    path: impl AsRef<Path>,
) -> Result<(Model, BTreeMap<String, serde_json::Value>)> {
    let path = path.as_ref();
    let file = open_checkpoint(path)?;
    let mut r = BufReader::new(file);
    let header = read_header_from(path, &mut r)?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| io_at(path, e))?;
    if payload.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: payload length {} is not a multiple of 4",
            path.display(),
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    let mut table: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for t in &header.tensors {
        if table.insert(t.name.as_str(), t).is_some() {
            return Err(Error::Checkpoint(format!(
                "{}: duplicate tensor entry '{}'",
                path.display(),
                t.name
            )));
        }
    }

    // Weights are overwritten below, so the init seed is irrelevant.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(&mut rng, header.config.clone())?;
    for (_, p) in model.grouped_params_mut() {
        let entry = table.get(p.name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "{}: tensor '{}' required by the model is missing",
                path.display(),
                p.name
            ))
        })?;
        if entry.shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{}' has shape {:?}, model expects {:?}",
                path.display(),
                entry.name,
                entry.shape,
                p.value.shape()
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.num_elements();
        if end > values.len() {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{}' extends past the payload ({} > {} elements)",
                path.display(),
                entry.name,
                end,
                values.len()
            )));
        }
        let arr = Arr::from_shape_vec(IxDyn(&entry.shape), values[start..end].to_vec())
            .expect("shape/length agreement checked above");
        p.set_value(arr);
    }
    Ok((model, header.meta))
}
