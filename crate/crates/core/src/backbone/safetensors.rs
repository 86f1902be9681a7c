//! Minimal reader for the safetensors container (JSON header + raw little-endian data).

use std::collections::HashMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::Deserialize;

use crate::error::{GazeError, Result};

#[derive(Debug, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (usize, usize),
}

/// All tensors of one file, decoded to `f32` on access.
#[derive(Debug)]
pub struct SafeTensors {
    entries: HashMap<String, Entry>,
    data: Vec<u8>,
}

impl SafeTensors {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::parse(bytes).map_err(|e| GazeError::Checkpoint(format!("{}: {e}", path.display())))
    }

    fn parse(bytes: Vec<u8>) -> std::result::Result<Self, String> {
        if bytes.len() < 8 {
            return Err("file shorter than header length".into());
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = bytes.get(8..8 + n).ok_or("truncated header")?;
        let raw: HashMap<String, serde_json::Value> = serde_json::from_slice(header).map_err(|e| e.to_string())?;
        let mut entries = HashMap::new();
        for (name, value) in raw {
            if name == "__metadata__" {
                continue;
            }
            let entry: Entry = serde_json::from_value(value).map_err(|e| format!("{name}: {e}"))?;
            entries.insert(name, entry);
        }
        let data = bytes[8 + n..].to_vec();
        for (name, e) in &entries {
            if e.data_offsets.1 > data.len() || e.data_offsets.0 > e.data_offsets.1 {
                return Err(format!("{name}: data offsets out of bounds"));
            }
        }
        Ok(Self { entries, data })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<ArrayD<f32>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| GazeError::Checkpoint(format!("tensor `{name}` missing from weights file")))?;
        let raw = &self.data[e.data_offsets.0..e.data_offsets.1];
        let values: Vec<f32> = match e.dtype.as_str() {
            "F32" => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            "F64" => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect(),
            "F16" => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            "BF16" => raw
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            other => return Err(GazeError::Checkpoint(format!("tensor `{name}`: unsupported dtype {other}"))),
        };
        ArrayD::from_shape_vec(IxDyn(&e.shape), values)
            .map_err(|err| GazeError::Checkpoint(format!("tensor `{name}`: {err}")))
    }
}

#[cfg(test)]
pub(crate) fn encode_f32(tensors: &[(&str, &ArrayD<f32>)]) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut data = Vec::new();
    for (name, t) in tensors {
        let start = data.len();
        for v in t.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        header.insert(
            name.to_string(),
            serde_json::json!({"dtype": "F32", "shape": t.shape(), "data_offsets": [start, data.len()]}),
        );
    }
    let header = serde_json::to_vec(&header).unwrap();
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    out
}
