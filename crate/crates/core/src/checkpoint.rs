//! Model container files.
//!
//! Layout: the 8-byte magic `DIFFCEv1`, a little-endian `u32` header length,
//! a JSON header, then every tensor as little-endian `f32` in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversarial::{ClassifierConfig, ClassifierModel};
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};
use crate::schedule::Schedule;
use crate::score::{DenoiserConfig, DenoiserModel};

const MAGIC: &[u8; 8] = b"DIFFCEv1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Denoiser(DenoiserConfig),
    Classifier {
        cfg: ClassifierConfig,
        epsilon: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub model: ModelSpec,
    pub dim: usize,
    pub n_classes: usize,
    pub schedule: Schedule,
    pub config_digest: String,
    pub tensors: Vec<TensorInfo>,
}

fn fmt_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn encode(header: &Header, params: &ParamSet) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for v in &t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Header, ParamSet)> {
    if bytes.len() < 12 {
        return Err(fmt_err(bytes.len() as u64, "truncated before header length"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fmt_err(0, "bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = 12 + hlen;
    if bytes.len() < end {
        return Err(fmt_err(bytes.len() as u64, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..end])
        .map_err(|e| fmt_err(12, format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(fmt_err(12, format!("unsupported version {}", header.version)));
    }
    let mut pos = end;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        let need = pos + 4 * n;
        if bytes.len() < need {
            return Err(fmt_err(
                bytes.len() as u64,
                format!("payload of tensor `{}` truncated", info.name),
            ));
        }
        let data = bytes[pos..need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push(Tensor {
            name: info.name.clone(),
            shape: info.shape.clone(),
            data,
        });
        pos = need;
    }
    if pos != bytes.len() {
        return Err(fmt_err(pos as u64, "trailing bytes after payload"));
    }
    Ok((header, ParamSet { tensors }))
}

fn header_for(model: ModelSpec, dim: usize, n_classes: usize, sched: &Schedule, digest: &str, p: &ParamSet) -> Header {
    Header {
        version: FORMAT_VERSION,
        model,
        dim,
        n_classes,
        schedule: *sched,
        config_digest: digest.to_string(),
        tensors: p
            .tensors
            .iter()
            .map(|t| TensorInfo {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<(Header, ParamSet)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn check_layout(expected: &ParamSet, found: &ParamSet) -> Result<()> {
    let same = expected.tensors.len() == found.tensors.len()
        && expected
            .tensors
            .iter()
            .zip(&found.tensors)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if same {
        Ok(())
    } else {
        Err(fmt_err(12, "tensor layout does not match the model description"))
    }
}

pub fn save_denoiser(path: &Path, m: &DenoiserModel, sched: &Schedule, digest: &str) -> Result<()> {
    let h = header_for(ModelSpec::Denoiser(m.cfg), m.dim, m.n_classes, sched, digest, &m.params);
    write_file(path, &encode(&h, &m.params)?)
}

pub fn load_denoiser(path: &Path) -> Result<(DenoiserModel, Header)> {
    let (h, params) = read_file(path)?;
    let ModelSpec::Denoiser(cfg) = h.model else {
        return Err(fmt_err(12, "checkpoint does not hold a denoiser"));
    };
    let mut m = DenoiserModel::new(cfg, h.dim, h.n_classes, 0)?;
    check_layout(&m.params, &params)?;
    m.params = params;
    Ok((m, h))
}

pub fn save_classifier(
    path: &Path,
    m: &ClassifierModel,
    epsilon: f64,
    sched: &Schedule,
    digest: &str,
) -> Result<()> {
    let spec = ModelSpec::Classifier {
        cfg: m.cfg.clone(),
        epsilon,
    };
    let h = header_for(spec, m.dim, m.n_classes, sched, digest, &m.params);
    write_file(path, &encode(&h, &m.params)?)
}

pub fn load_classifier(path: &Path) -> Result<(ClassifierModel, Header)> {
    let (h, params) = read_file(path)?;
    let ModelSpec::Classifier { cfg, .. } = h.model.clone() else {
        return Err(fmt_err(12, "checkpoint does not hold a classifier"));
    };
    let mut m = ClassifierModel::new(cfg, h.dim, h.n_classes, 0)?;
    check_layout(&m.params, &params)?;
    m.params = params;
    Ok((m, h))
}
