//! Binary checkpoint format.
//!
//! Layout (all integers little-endian u32 unless noted):
//!   magic "DLLU" | version | meta-JSON len + bytes | n tensors |
//!   per tensor: name len + bytes | ndims | dims... | f64 LE data.
//!
//! Meta JSON carries the encoder config, the training step, and optional
//! optimizer scalars; optimizer moment vectors are stored as tensors named
//! "opt.m.<param>" / "opt.v.<param>".

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{DeluluError, Result};
use crate::numerics::{OptimizerState, Tensor};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DLLU";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: EncoderConfig,
    step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptMeta {
    step: u64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    epsilon: f64,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub step: u64,
    pub params: EncoderParams,
    pub optimizer: Option<OptimizerState>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u32::from_le_bytes(b))
}

fn truncated() -> DeluluError {
    DeluluError::Data("truncated checkpoint".into())
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    let mut bytes = Vec::with_capacity(t.data().len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let nlen = read_u32(r)? as usize;
    let mut nb = vec![0u8; nlen];
    r.read_exact(&mut nb).map_err(|_| truncated())?;
    let name = String::from_utf8(nb)
        .map_err(|_| DeluluError::Data("checkpoint tensor name is not UTF-8".into()))?;
    let ndims = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|_| truncated())?;
    let data: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((name, Tensor::new(shape, data)?))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let meta = Meta {
        config: ckpt.config.clone(),
        step: ckpt.step,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptMeta {
            step: o.step,
            beta1: o.beta1,
            beta2: o.beta2,
            weight_decay: o.weight_decay,
            epsilon: o.epsilon,
        }),
    };
    let mj = serde_json::to_vec(&meta)?;
    write_u32(&mut w, mj.len() as u32)?;
    w.write_all(&mj)?;

    let n_opt = ckpt.optimizer.as_ref().map_or(0, |o| 2 * o.moments.len());
    write_u32(&mut w, (ckpt.params.len() + n_opt) as u32)?;
    for (name, t) in ckpt.params.iter() {
        write_tensor(&mut w, name, t)?;
    }
    if let Some(opt) = &ckpt.optimizer {
        if opt.moments.len() != ckpt.params.len() {
            return Err(DeluluError::Contract(format!(
                "optimizer tracks {} tensors, model has {}",
                opt.moments.len(),
                ckpt.params.len()
            )));
        }
        for ((name, _), (m, v)) in ckpt.params.iter().zip(&opt.moments) {
            write_tensor(&mut w, &format!("opt.m.{name}"), &Tensor::new(vec![m.len()], m.clone())?)?;
            write_tensor(&mut w, &format!("opt.v.{name}"), &Tensor::new(vec![v.len()], v.clone())?)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated())?;
    if &magic != MAGIC {
        return Err(DeluluError::Data(format!(
            "bad checkpoint magic {magic:?}; expected \"DLLU\""
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DeluluError::Data(format!(
            "unsupported checkpoint version {version} (supported: {VERSION})"
        )));
    }
    let mlen = read_u32(&mut r)? as usize;
    let mut mb = vec![0u8; mlen];
    r.read_exact(&mut mb).map_err(|_| truncated())?;
    let meta: Meta = serde_json::from_slice(&mb)?;

    let n_tensors = read_u32(&mut r)? as usize;
    let mut tensors = IndexMap::new();
    for _ in 0..n_tensors {
        let (name, t) = read_tensor(&mut r)?;
        tensors.insert(name, t);
    }

    let opt_names: Vec<String> =
        tensors.keys().filter(|k| k.starts_with("opt.m.")).cloned().collect();
    let optimizer = match (&meta.optimizer, opt_names.is_empty()) {
        (Some(om), false) => {
            let mut moments = Vec::new();
            for name in tensors.keys().filter(|k| !k.starts_with("opt.")) {
                let m = tensors
                    .get(&format!("opt.m.{name}"))
                    .ok_or_else(|| DeluluError::Data(format!("missing opt.m.{name}")))?;
                let v = tensors
                    .get(&format!("opt.v.{name}"))
                    .ok_or_else(|| DeluluError::Data(format!("missing opt.v.{name}")))?;
                moments.push((m.data().to_vec(), v.data().to_vec()));
            }
            Some(OptimizerState {
                step: om.step,
                beta1: om.beta1,
                beta2: om.beta2,
                weight_decay: om.weight_decay,
                epsilon: om.epsilon,
                moments,
            })
        }
        (None, true) => None,
        _ => {
            return Err(DeluluError::Data(
                "checkpoint optimizer metadata and moment tensors disagree".into(),
            ))
        }
    };

    let param_tensors: IndexMap<String, Tensor> =
        tensors.into_iter().filter(|(k, _)| !k.starts_with("opt.")).collect();
    let params = EncoderParams::from_tensors(param_tensors);
    params.validate_against(&meta.config)?;
    Ok(Checkpoint { config: meta.config, step: meta.step, params, optimizer })
}
