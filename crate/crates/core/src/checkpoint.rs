//! Versioned checkpoint archive.
//!
//! Layout: the 8-byte magic `GAZELLE\0`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then raw
//! little-endian `f32` data: every parameter in header order, followed by the
//! Adam first and second moments in the same order when optimizer state is
//! present.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::decoder::{DecoderConfig, GazeLle};
use crate::error::{GazeError, Result};
use crate::nn::HasParams;
use crate::trainer::Adam;

const MAGIC: &[u8; 8] = b"GAZELLE\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub data: ArrayD<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub decoder: DecoderConfig,
    pub d_f: usize,
    pub backbone: Option<BackboneSpec>,
    /// Snapshot of the training configuration that produced the weights.
    pub train: Option<serde_json::Value>,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<Adam>,
    pub rng: Option<ChaCha8Rng>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: usize,
    decoder: DecoderConfig,
    d_f: usize,
    backbone: Option<BackboneSpec>,
    train: Option<serde_json::Value>,
    params: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    rng: Option<ChaCha8Rng>,
}

fn bad(msg: impl Into<String>) -> GazeError {
    GazeError::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Weights only.
    pub fn from_model(model: &GazeLle<f32>, backbone: Option<&BackboneSpec>) -> Self {
        let mut params = Vec::new();
        model.for_each_param("", &mut |name, v, _| {
            params.push(NamedTensor {
                name: name.to_string(),
                data: v.to_owned(),
            })
        });
        Self {
            step: 0,
            decoder: model.config().clone(),
            d_f: model.d_f(),
            backbone: backbone.cloned(),
            train: None,
            params,
            optimizer: None,
            rng: None,
        }
    }

    /// Rebuilds the decoder with exactly the stored weights.
    pub fn build_model(&self) -> Result<GazeLle<f32>> {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = GazeLle::new(self.decoder.clone(), self.d_f, &mut rng)?;
        let missing = self.load_params_into(&mut model)?;
        if !missing.is_empty() {
            return Err(bad(format!("checkpoint lacks parameters: {}", missing.join(", "))));
        }
        if model.num_params() != self.params.iter().map(|p| p.data.len()).sum::<usize>() {
            return Err(bad("checkpoint has parameters the decoder does not"));
        }
        Ok(model)
    }

    /// Copies every stored tensor whose name exists in `model`, returning the
    /// model parameters that had no stored value. Shape disagreements are errors.
    pub fn load_params_into(&self, model: &mut impl HasParams<f32>) -> Result<Vec<String>> {
        let mut missing = Vec::new();
        let mut mismatch = None;
        model.for_each_param_mut("", &mut |name, mut v, _| {
            match self.params.iter().find(|p| p.name == name) {
                Some(p) if p.data.shape() == v.shape() => v.assign(&p.data),
                Some(p) => {
                    mismatch.get_or_insert(format!("`{name}`: stored {:?}, model {:?}", p.data.shape(), v.shape()));
                }
                None => missing.push(name.to_string()),
            }
        });
        match mismatch {
            Some(m) => Err(bad(format!("shape mismatch for {m}"))),
            None => Ok(missing),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            step: self.step,
            decoder: self.decoder.clone(),
            d_f: self.d_f,
            backbone: self.backbone.clone(),
            train: self.train.clone(),
            params: self
                .params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.data.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
            }),
            rng: self.rng.clone(),
        };
        if let Some(opt) = &self.optimizer {
            let names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
            if opt.names.iter().map(String::as_str).ne(names.iter().copied()) {
                return Err(bad("optimizer state does not follow parameter order"));
            }
        }
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(json.len() + 20 + 4 * self.params.iter().map(|p| p.data.len()).sum::<usize>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let mut put = |a: &ArrayD<f32>| {
            for v in a.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        self.params.iter().for_each(|p| put(&p.data));
        if let Some(opt) = &self.optimizer {
            opt.m.iter().for_each(&mut put);
            opt.v.iter().for_each(&mut put);
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad(format!("{} is not a checkpoint", path.display())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut cursor = 20 + hlen;
        let mut take = |shape: &[usize]| -> Result<ArrayD<f32>> {
            let n: usize = shape.iter().product();
            let raw = bytes.get(cursor..cursor + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
            cursor += 4 * n;
            let vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            ArrayD::from_shape_vec(IxDyn(shape), vals).map_err(|e| bad(e.to_string()))
        };
        let params = header
            .params
            .iter()
            .map(|e| {
                Ok(NamedTensor {
                    name: e.name.clone(),
                    data: take(&e.shape)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let optimizer = match header.optimizer {
            Some(o) => {
                let m = header.params.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
                let v = header.params.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
                Some(Adam {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    step: o.step,
                    names: header.params.iter().map(|e| e.name.clone()).collect(),
                    m,
                    v,
                })
            }
            None => None,
        };
        if cursor != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - cursor)));
        }
        Ok(Self {
            step: header.step,
            decoder: header.decoder,
            d_f: header.d_f,
            backbone: header.backbone,
            train: header.train,
            params,
            optimizer,
            rng: header.rng,
        })
    }
}
