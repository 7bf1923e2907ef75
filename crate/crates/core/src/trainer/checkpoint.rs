//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `ECHODIFF`, a little-endian `u32` format
//! version, a `u64` header length, the JSON header, then the payload:
//! every section's arrays as little-endian `f32`, in inventory order.
//! The header records the payload length and its SHA-256 digest, so a
//! truncated or edited file is rejected on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState};
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::net::{Denoiser, DenoiserParameters, NetConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ECHODIFF";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub schedule: NoiseSchedule,
    pub step: u64,
    pub params: DenoiserParameters<f32>,
    pub ema: Option<DenoiserParameters<f32>>,
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    net: NetConfig,
    train: TrainConfig,
    schedule_kind: ScheduleKind,
    betas: Vec<f64>,
    step: u64,
    /// `(path, shape)` in payload order.
    inventory: Vec<(String, Vec<usize>)>,
    sections: Vec<String>,
    payload_bytes: u64,
    fingerprint: String,
}

fn section_names(has_ema: bool) -> Vec<String> {
    let mut s = vec!["params".to_string()];
    if has_ema {
        s.push("ema".into());
    }
    s.extend(["adam_m".to_string(), "adam_v".to_string()]);
    s
}

impl Checkpoint {
    pub fn from_state(net: &NetConfig, train: &TrainConfig, schedule: &NoiseSchedule, state: &TrainState<f32>) -> Self {
        Self {
            net: net.clone(),
            train: train.clone(),
            schedule: schedule.clone(),
            step: state.step,
            params: state.params.clone(),
            ema: state.ema.clone(),
            adam_m: state.adam_m.clone(),
            adam_v: state.adam_v.clone(),
        }
    }

    /// Training state to continue from. A run configured without averaging
    /// drops the stored average; one configured with it starts a fresh one
    /// if the checkpoint has none.
    pub fn into_state(self, cfg: &TrainConfig) -> TrainState<f32> {
        let ema = match cfg.ema_decay {
            None => None,
            Some(_) => Some(self.ema.unwrap_or_else(|| self.params.clone())),
        };
        TrainState { params: self.params, ema, adam_m: self.adam_m, adam_v: self.adam_v, step: self.step }
    }

    /// The weights used for sampling: the running average when present.
    pub fn sampling_params(&self) -> &DenoiserParameters<f32> {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::new(self.net.clone())
    }

    /// Hash of the serialized parameter payload.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.payload()))
    }

    pub fn ensure_compatible(&self, net: &NetConfig, schedule: &NoiseSchedule) -> Result<()> {
        if &self.net != net {
            return Err(Error::Checkpoint("network configuration differs from the checkpoint's".into()));
        }
        if self.schedule.fingerprint() != schedule.fingerprint() {
            return Err(Error::Checkpoint("noise schedule differs from the checkpoint's".into()));
        }
        Ok(())
    }

    fn sections(&self) -> Vec<&[Tensor<f32>]> {
        let mut s = vec![self.params.tensors()];
        if let Some(e) = &self.ema {
            s.push(e.tensors());
        }
        s.push(&self.adam_m);
        s.push(&self.adam_v);
        s
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.sections().len() * self.params.tensors().iter().map(Tensor::numel).sum::<usize>());
        for sec in self.sections() {
            for t in sec {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = self.payload();
        let header = Header {
            net: self.net.clone(),
            train: self.train.clone(),
            schedule_kind: self.schedule.kind(),
            betas: self.schedule.betas().to_vec(),
            step: self.step,
            inventory: self.params.iter().map(|(p, t)| (p.to_string(), t.shape().to_vec())).collect(),
            sections: section_names(self.ema.is_some()),
            payload_bytes: payload.len() as u64,
            fingerprint: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = || Error::Checkpoint("fingerprint mismatch (truncated or corrupted file)".into());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt());
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let payload = &body[hlen..];
        if payload.len() as u64 != header.payload_bytes || hex::encode(Sha256::digest(payload)) != header.fingerprint {
            return Err(corrupt());
        }
        let per_section: usize = header.inventory.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if header.sections.len() * per_section * 4 != payload.len() {
            return Err(Error::Checkpoint("payload size disagrees with the inventory".into()));
        }
        let net = Denoiser::new(header.net.clone())?;
        let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut read_section = || -> Result<Vec<Tensor<f32>>> {
            header
                .inventory
                .iter()
                .map(|(_, shape)| Tensor::from_vec(shape, floats.by_ref().take(shape.iter().product()).collect()))
                .collect()
        };
        let mut sections = BTreeMap::new();
        for name in &header.sections {
            sections.insert(name.clone(), read_section()?);
        }
        let named = |ts: Vec<Tensor<f32>>| -> Result<DenoiserParameters<f32>> {
            let map = header.inventory.iter().map(|(p, _)| p.clone()).zip(ts).collect();
            DenoiserParameters::from_named(net.inventory(), map)
        };
        let mut take = |n: &str| sections.remove(n).ok_or_else(|| Error::Checkpoint(format!("missing section {n}")));
        let params = named(take("params")?)?;
        let ema = if header.sections.iter().any(|s| s == "ema") { Some(named(take("ema")?)?) } else { None };
        let adam_m = take("adam_m")?;
        let adam_v = take("adam_v")?;
        Ok(Self {
            net: header.net,
            train: header.train,
            schedule: NoiseSchedule::from_betas(header.schedule_kind, header.betas)?,
            step: header.step,
            params,
            ema,
            adam_m,
            adam_v,
        })
    }
}

/// Writes atomically (temp file, then rename), so an interrupted write
/// leaves the previous checkpoint in place.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    crate::io::atomic_write(path, &ck.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
