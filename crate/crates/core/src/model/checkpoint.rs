//! Single-file checkpoint archive.
//!
//! Layout: the header line `mixsup-ckpt-v1`, one line of JSON metadata
//! (model config, training step, scalar type, tensor names and shapes), then
//! every tensor's values as little-endian `f64` in metadata order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::unet::{ModelConfig, UNet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_HEADER: &str = "mixsup-ckpt-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    step: u64,
    scalar: String,
    tensors: Vec<TensorMeta>,
}

/// A model restored from disk together with its training-step counter.
pub struct Checkpoint<T> {
    pub model: UNet<T>,
    pub step: u64,
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &UNet<T>, step: u64, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    let meta = Metadata {
        config: *model.config(),
        step,
        scalar: T::NAME.to_string(),
        tensors: model
            .params()
            .iter()
            .map(|p| TensorMeta {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    writeln!(out, "{}", serde_json::to_string(&meta)?)?;
    for p in model.params().iter() {
        for v in &p.data {
            out.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(input: R) -> Result<Checkpoint<T>> {
    let mut input = BufReader::new(input);
    let mut line = String::new();
    input.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_HEADER {
        return Err(Error::Checkpoint(format!(
            "bad header {:?}, expected {CHECKPOINT_HEADER}",
            line.trim_end()
        )));
    }
    line.clear();
    input.read_line(&mut line)?;
    let meta: Metadata = serde_json::from_str(line.trim_end())?;
    let mut model = UNet::<T>::build(&meta.config, 0)?;
    let mut store = ParamStore::new();
    let mut buf = [0u8; 8];
    for t in &meta.tensors {
        let n: usize = t.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            input
                .read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated tensor {}: {e}", t.name)))?;
            data.push(T::of(f64::from_le_bytes(buf)));
        }
        store.push(t.name.clone(), t.shape.clone(), data);
    }
    if input.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    model.load_params(store)?;
    Ok(Checkpoint { model, step: meta.step })
}

/// Writes through a temporary file so an interrupted save never leaves a
/// half-written checkpoint behind.
pub fn save_checkpoint<T: Scalar>(model: &UNet<T>, step: u64, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_checkpoint(model, step, fs::File::create(&tmp)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::unet::BranchMode;

    #[test]
    fn round_trip_preserves_parameters() {
        let config = ModelConfig {
            base_channels: 4,
            depth: 2,
            ..ModelConfig::default()
        };
        let model = UNet::<f32>::build(&config, 11).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, 42, &mut bytes).unwrap();
        assert!(bytes.starts_with(b"mixsup-ckpt-v1\n"));
        let back: Checkpoint<f32> = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.model.params(), model.params());
        assert_eq!(back.model.config(), model.config());
    }

    #[test]
    fn rejects_wrong_header_and_truncation() {
        assert!(read_checkpoint::<f32, _>(&b"other-v9\n{}\n"[..]).is_err());
        let config = ModelConfig {
            base_channels: 4,
            depth: 2,
            branch_mode: BranchMode::Single,
            ..ModelConfig::default()
        };
        let model = UNet::<f64>::build(&config, 1).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, 0, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            read_checkpoint::<f64, _>(bytes.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }
}
