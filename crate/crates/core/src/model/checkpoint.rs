//! Self-describing checkpoint files.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON header
//! (configuration, epoch, seed, tensor index, payload digest), then every tensor as
//! little-endian `f32` values: parameters first, then the optimizer's first and
//! second moments when present.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{NetworkConfig, TripleUNet};
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRYOSEG\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    epoch: usize,
    seed: u64,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
    payload_bytes: u64,
    sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
    /// Free-form run information (fold, configuration digest, ...).
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(
        model: &TripleUNet,
        optimizer: Option<&Adam>,
        epoch: usize,
        seed: u64,
        metadata: serde_json::Value,
    ) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
            optimizer: optimizer.cloned(),
            epoch,
            seed,
            metadata,
        }
    }

    /// Rebuilds the network and checks that the stored tensors fit it.
    pub fn into_model(self) -> Result<(TripleUNet, Option<Adam>)> {
        let mut model = TripleUNet::new(self.config, self.seed)?;
        model.set_params(self.params)?;
        Ok((model, self.optimizer))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload: Vec<u8> = Vec::with_capacity(4 * self.params.num_scalars());
        let mut push = |t: &Tensor| {
            for &v in t.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        let ids: Vec<_> = self.params.ids().collect();
        for &id in &ids {
            push(self.params.get(id));
        }
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != ids.len() || opt.v.len() != ids.len() {
                return Err(Error::Integrity("optimizer state does not match the parameters".into()));
            }
            opt.m.iter().chain(opt.v.iter()).for_each(&mut push);
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            seed: self.seed,
            metadata: self.metadata.clone(),
            tensors: ids
                .iter()
                .map(|&id| {
                    let s = self.params.get(id).shape();
                    TensorEntry {
                        name: self.params.name(id).to_string(),
                        shape: [s[0], s[1], s[2], s[3]],
                    }
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry {
                step: o.step,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            }),
            payload_bytes: payload.len() as u64,
            sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;

        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // write beside the target and rename so a crash never leaves a torn file
        let tmp = path.with_extension("partial");
        let write = || -> std::io::Result<()> {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(CHECKPOINT_MAGIC)?;
            f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            f.write_all(&(header.len() as u64).to_le_bytes())?;
            f.write_all(&header)?;
            f.write_all(&payload)?;
            f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let format = |message: &str| Error::Format {
            version: None,
            message: format!("{}: {message}", path.display()),
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(format("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                version: Some(version),
                message: format!(
                    "{}: checkpoint format {version} is not supported (expected {CHECKPOINT_VERSION})",
                    path.display()
                ),
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if header_len > body.len() {
            return Err(format("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])?;
        let payload = &body[header_len..];
        if payload.len() as u64 != header.payload_bytes {
            return Err(Error::Integrity(format!(
                "{}: payload is {} bytes, header says {}",
                path.display(),
                payload.len(),
                header.payload_bytes
            )));
        }
        if hex::encode(Sha256::digest(payload)) != header.sha256 {
            return Err(Error::Integrity(format!("{}: checksum mismatch", path.display())));
        }

        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut take = |shape: [usize; 4]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            if data.len() != n {
                return Err(Error::Integrity(format!("{}: payload too short", path.display())));
            }
            Ok(Tensor::from_shape_vec(shape, data).expect("length checked"))
        };
        let mut params = ParamStore::new();
        for t in &header.tensors {
            params.add(t.name.clone(), take(t.shape)?);
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let mut m = Vec::with_capacity(header.tensors.len());
                for t in &header.tensors {
                    m.push(take(t.shape)?);
                }
                let mut v = Vec::with_capacity(header.tensors.len());
                for t in &header.tensors {
                    v.push(take(t.shape)?);
                }
                Some(Adam {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    step: o.step,
                    m,
                    v,
                })
            }
        };
        if floats.next().is_some() {
            return Err(Error::Integrity(format!("{}: trailing payload data", path.display())));
        }
        Ok(Self {
            config: header.config,
            params,
            optimizer,
            epoch: header.epoch,
            seed: header.seed,
            metadata: header.metadata,
        })
    }
}
