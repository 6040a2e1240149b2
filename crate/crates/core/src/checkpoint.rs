//! Parameter files: an 8-byte little-endian header length, a JSON header
//! naming each tensor with its shape and offset, then raw little-endian f64s.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, ParamSet};
use crate::tracker::{ModelSpec, TrackerModel};

const FORMAT: &str = "vsdmot-params";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the data section, in values.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save_params(path: &Path, params: &impl ParamSet, meta: serde_json::Value) -> Result<()> {
    let named = params.named_parameters();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0;
    for (name, p) in &named {
        let (rows, cols) = p.value().shape();
        tensors.push(TensorEntry {
            name: name.clone(),
            rows,
            cols,
            offset,
        });
        offset += rows * cols;
    }
    let header = serde_json::to_vec(&Header {
        format: FORMAT.into(),
        version: VERSION,
        meta,
        tensors,
    })?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for (_, p) in &named {
        for v in p.value().as_slice() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads the metadata and all named tensors of a parameter file.
pub fn read_params(path: &Path) -> Result<(serde_json::Value, Vec<(String, Matrix)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.to_string(),
    };
    if bytes.len() < 8 {
        return Err(bad("file too short for a parameter header"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let data_start = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[8..data_start])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad("unsupported parameter file format"));
    }
    let data = &bytes[data_start..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n = t.rows * t.cols;
        let lo = t.offset * 8;
        let hi = lo + n * 8;
        if hi > data.len() {
            return Err(bad(&format!("tensor {} runs past the end of the file", t.name)));
        }
        let values = data[lo..hi]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((t.name, Matrix::new(t.rows, t.cols, values)?));
    }
    Ok((header.meta, out))
}

/// Copies tensors into `params`; names and shapes must match exactly.
pub fn load_into(params: &mut impl ParamSet, tensors: Vec<(String, Matrix)>) -> Result<()> {
    let mut targets = params.named_parameters_mut();
    if targets.len() != tensors.len() {
        return Err(Error::Shape(format!(
            "expected {} tensors, file has {}",
            targets.len(),
            tensors.len()
        )));
    }
    for ((name, p), (file_name, m)) in targets.iter_mut().zip(tensors) {
        if *name != file_name || p.value().shape() != m.shape() {
            return Err(Error::Shape(format!(
                "tensor {file_name} {:?} does not fit parameter {name} {:?}",
                m.shape(),
                p.value().shape()
            )));
        }
        p.set_value(m);
    }
    Ok(())
}

impl TrackerModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, self, serde_json::to_value(self.spec())?)
    }

    pub fn load(path: &Path) -> Result<TrackerModel> {
        let (meta, tensors) = read_params(path)?;
        let spec: ModelSpec = serde_json::from_value(meta)?;
        let mut model = TrackerModel::new(spec, 0)?;
        load_into(&mut model, tensors)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::StudentConfig;
    use crate::tracker::Variant;

    #[test]
    fn tracker_model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let spec = ModelSpec {
            variant: Variant::Full,
            student: StudentConfig {
                input_dim: 16,
                hidden_dim: 16,
                ff_dim: 32,
                output_dim: 16,
                ..StudentConfig::default()
            },
            ..ModelSpec::default()
        };
        let mut model = TrackerModel::new(spec, 3).unwrap();
        model.dswr.as_mut().unwrap().bias.value_mut().set(0, 0, 0.1 + 0.2);
        model.save(&path).unwrap();
        let back = TrackerModel::load(&path).unwrap();
        assert_eq!(back.spec(), model.spec());
        for ((na, a), (nb, b)) in model.named_parameters().iter().zip(back.named_parameters()) {
            assert_eq!(na, &nb);
            assert_eq!(a.value(), b.value());
            assert_eq!(a.is_trainable(), b.is_trainable());
        }
    }

    #[test]
    fn truncated_or_mismatched_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        assert!(read_params(&path).is_err());
        let small = crate::layers::Linear::zeros(2, 3);
        save_params(&path, &small, serde_json::Value::Null).unwrap();
        let (_, tensors) = read_params(&path).unwrap();
        let mut other = crate::layers::Linear::zeros(3, 2);
        assert!(load_into(&mut other, tensors).is_err());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_params(&path).is_err());
    }
}
