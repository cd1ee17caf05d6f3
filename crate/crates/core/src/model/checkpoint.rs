//! Checkpoint layout: 8-byte magic `SECKPT01`, a little-endian `u64` header
//! length, a JSON header, then every parameter as little-endian `f64` values
//! in the order the header lists them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{ModelDims, ModelParams, Param};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"SECKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Baseline,
    Secure,
    Reference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub role: Role,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    d: usize,
    #[serde(rename = "H")]
    hidden: usize,
    heads: usize,
    t_agnostic: bool,
    seed: u64,
    role: Role,
    mu: [f64; 2],
    params: Vec<ParamEntry>,
}

pub fn checkpoint_bytes(params: &ModelParams, role: Role) -> Vec<u8> {
    let header = Header {
        d: params.dims.d,
        hidden: params.dims.hidden,
        heads: params.dims.heads,
        t_agnostic: true,
        seed: params.seed,
        role,
        mu: [params.mu1, params.mu2],
        params: params
            .iter()
            .map(|(p, t)| ParamEntry {
                name: p.name().into(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, role: Role) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, checkpoint_bytes(params, role)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, &path.display().to_string())
}

fn parse_checkpoint(bytes: &[u8], file: &str) -> Result<Checkpoint> {
    let fail = |offset: usize, reason: String| Error::Format {
        file: file.to_string(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 16 {
        return Err(fail(bytes.len(), "unexpected end of data".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail(0, "not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail(bytes.len(), "unexpected end of data in header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| fail(16, format!("malformed header: {e}")))?;
    let dims = ModelDims {
        d: header.d,
        hidden: header.hidden,
        heads: header.heads,
    };
    dims.validate()?;

    let mut slots: Vec<Option<Tensor>> = vec![None; Param::ALL.len()];
    let mut offset = body;
    for entry in &header.params {
        let p = Param::from_name(&entry.name).ok_or_else(|| fail(16, format!("unknown parameter `{}`", entry.name)))?;
        if entry.shape != p.shape(&dims) {
            return Err(fail(
                16,
                format!("parameter `{}` has shape {:?}", entry.name, entry.shape),
            ));
        }
        let n: usize = entry.shape.iter().product();
        let end = offset + 8 * n;
        if end > bytes.len() {
            return Err(fail(bytes.len(), format!("unexpected end of data in `{}`", entry.name)));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        slots[p.index()] = Some(Tensor::new(entry.shape.clone(), data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(fail(offset, "trailing data".into()));
    }
    let tensors = slots
        .into_iter()
        .zip(Param::ALL)
        .map(|(t, p)| t.ok_or_else(|| fail(16, format!("missing parameter `{}`", p.name()))))
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_tensors(dims, tensors, (header.mu[0], header.mu[1]), header.seed)?;
    if !params.all_finite() {
        return Err(fail(body, "non-finite parameter value".into()));
    }
    Ok(Checkpoint {
        params,
        role: header.role,
    })
}
