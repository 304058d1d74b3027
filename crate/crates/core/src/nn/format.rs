//! CAMF weight file format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "CAMF" | u32 version = 1 | u32 manifestLen | manifest JSON | f32 weights
//! ```
//!
//! The manifest carries the layer list, input shape, storage precision, and
//! the explicit shape of every weight tensor. Weight data follows in layer
//! declaration order, kernel then bias, row-major. Save -> load -> save is
//! byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Real;
use crate::tensor::Tensor;

use super::{LayerSpec, LayerWeights, Model};

const MAGIC: &[u8; 4] = b"CAMF";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    input_shape: Vec<usize>,
    precision: String,
    layers: Vec<LayerSpec>,
    weights: Vec<WeightEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightEntry {
    layer: usize,
    kernel: Vec<usize>,
    bias: Vec<usize>,
}

/// Writes a model as a CAMF file. Weights are stored as 32-bit floats
/// (round-to-nearest when the model is higher precision).
pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut values: Vec<f32> = Vec::new();
    for (i, slot) in model.weights().iter().enumerate() {
        if let Some(w) = slot {
            entries.push(WeightEntry {
                layer: i,
                kernel: w.kernel.shape().to_vec(),
                bias: w.bias.shape().to_vec(),
            });
            values.extend(w.kernel.data().iter().map(|v| v.as_f64() as f32));
            values.extend(w.bias.data().iter().map(|v| v.as_f64() as f32));
        }
    }
    let manifest = Manifest {
        input_shape: model.input_shape().to_vec(),
        precision: "f32".into(),
        layers: model.layers().to_vec(),
        weights: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&manifest_bytes)?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a CAMF file back into a model of the requested precision
/// (widening from the stored 32-bit floats is exact).
pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let mut reader = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut reader, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut word = [0u8; 4];
    read_exact(&mut reader, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    read_exact(&mut reader, &mut word, "manifest length")?;
    let manifest_len = u32::from_le_bytes(word) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    read_exact(&mut reader, &mut manifest_bytes, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::ManifestInvalid(e.to_string()))?;
    if manifest.precision != "f32" {
        return Err(Error::ManifestInvalid(format!(
            "unsupported precision `{}`",
            manifest.precision
        )));
    }

    // Manifest weight entries must match the parameterized layers exactly.
    let declared: Vec<(usize, Vec<usize>, Vec<usize>)> = manifest
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.weight_shapes().map(|(k, b)| (i, k, b)))
        .collect();
    if declared.len() != manifest.weights.len() {
        return Err(Error::ManifestInvalid(format!(
            "{} weight entries for {} parameterized layers",
            manifest.weights.len(),
            declared.len()
        )));
    }
    for (entry, (layer, kernel, bias)) in manifest.weights.iter().zip(&declared) {
        if entry.layer != *layer || &entry.kernel != kernel || &entry.bias != bias {
            return Err(Error::ManifestInvalid(format!(
                "weight entry for layer {} does not match the layer spec",
                entry.layer
            )));
        }
    }

    let mut weights: Vec<Option<LayerWeights<T>>> = vec![None; manifest.layers.len()];
    let mut buf = [0u8; 4];
    for entry in &manifest.weights {
        let mut read_tensor = |shape: &[usize], what: &str| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                read_exact(&mut reader, &mut buf, what)?;
                data.push(T::from_f64_rn(f32::from_le_bytes(buf) as f64));
            }
            Tensor::from_vec(shape.to_vec(), data)
        };
        let kernel = read_tensor(&entry.kernel, "kernel data")?;
        let bias = read_tensor(&entry.bias, "bias data")?;
        weights[entry.layer] = Some(LayerWeights { kernel, bias });
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::ManifestInvalid("trailing bytes after weight data".into()));
    }

    Model::new(manifest.layers, weights, manifest.input_shape)
        .map_err(|e| Error::ManifestInvalid(e.to_string()))
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|_| Error::Truncated(what.into()))
}
