//! Checkpoint format: one line of JSON manifest (architecture, shapes, flat
//! order description), a newline, then the flat parameter view as raw
//! little-endian f32 bytes. Round-trips are bit-exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EngineError, Layer, LayerSpec, Model};

pub const CHECKPOINT_FORMAT: &str = "driftlab-ckpt-v1";
const FLAT_ORDER: &str = "layers in order; tensors per layer in declaration order \
(linear: weight,bias; factored_linear: w1,w2,bias; conv2d: kernel,bias); row-major";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    num_classes: usize,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    param_count: usize,
    flat_order: String,
}

pub fn save_model<W: Write>(model: &Model, mut writer: W) -> Result<(), CheckpointError> {
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        num_classes: model.num_classes,
        input_shape: model.input_shape.clone(),
        layers: model.specs(),
        param_count: model.param_count(),
        flat_order: FLAT_ORDER.into(),
    };
    let header = serde_json::to_string(&manifest)?;
    writer.write_all(header.as_bytes())?;
    writer.write_all(b"\n")?;
    for value in model.flatten() {
        writer.write_all(&value.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_model<R: Read>(mut reader: R) -> Result<Model, CheckpointError> {
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = reader.read(&mut byte)?;
        if n == 0 {
            return Err(CheckpointError::Malformed(
                "missing newline after manifest".into(),
            ));
        }
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
    }
    let manifest: Manifest = serde_json::from_slice(&header)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Malformed(format!(
            "unsupported format `{}`",
            manifest.format
        )));
    }
    let layers: Vec<Layer> = manifest.layers.iter().map(Layer::from_spec).collect();
    let mut model = Model::new(layers, manifest.num_classes, manifest.input_shape)?;
    if model.param_count() != manifest.param_count {
        return Err(CheckpointError::Malformed(format!(
            "manifest param_count {} does not match architecture ({})",
            manifest.param_count,
            model.param_count()
        )));
    }
    let mut payload = vec![0u8; manifest.param_count * 4];
    reader.read_exact(&mut payload)?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Malformed(
            "trailing bytes after parameter payload".into(),
        ));
    }
    let flat: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if !flat.iter().all(|v| v.is_finite()) {
        return Err(CheckpointError::Malformed(
            "non-finite parameter in payload".into(),
        ));
    }
    model.set_flat(&flat)?;
    Ok(model)
}

pub fn save_model_path<P: AsRef<Path>>(model: &Model, path: P) -> Result<(), CheckpointError> {
    let mut writer = BufWriter::new(File::create(path)?);
    save_model(model, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn load_model_path<P: AsRef<Path>>(path: P) -> Result<Model, CheckpointError> {
    load_model(BufReader::new(File::open(path)?))
}
