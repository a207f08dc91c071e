//! Model checkpoints: one line of compact JSON header, a newline, then
//! every tensor as raw little-endian `f64`s in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{path_err, Error, Result};
use crate::feedback::Variant;
use crate::net::{Network, NetworkConfig, Slot, SlotRef};

pub const CHECKPOINT_FORMAT: &str = "rwgcn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: usize,
    pub kind: TensorKind,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: NetworkConfig,
    pub variant: Variant,
    pub tensors: Vec<TensorEntry>,
}

pub fn checkpoint_to_bytes(net: &Network) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    net.visit(&mut |name, slot| {
        let (kind, trainable) = match &slot {
            SlotRef::Param(p) => (TensorKind::Param, p.trainable),
            SlotRef::Buffer(_) => (TensorKind::Buffer, false),
        };
        let t = slot.tensor();
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: data.len(),
            kind,
            trainable,
        });
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: net.config().clone(),
        variant: net.variant(),
        tensors,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&data);
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Network> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Data("checkpoint has no header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    let data = &bytes[split + 1..];
    let mut net = Network::new(header.config.clone())?;
    net.grow(header.variant)?;

    let mut expected = 0;
    for e in &header.tensors {
        let len = e.shape.iter().product::<usize>() * 8;
        if e.offset != expected || e.offset + len > data.len() {
            return Err(Error::Data(format!(
                "tensor {} has a bad offset or is truncated",
                e.name
            )));
        }
        expected += len;
    }
    if expected != data.len() {
        return Err(Error::Data(format!(
            "checkpoint data is {} bytes, header describes {expected}",
            data.len()
        )));
    }

    let mut entries = header.tensors.iter();
    let mut failure = None;
    net.visit_mut(&mut |name, slot| {
        if failure.is_some() {
            return;
        }
        let Some(e) = entries.next() else {
            failure = Some(format!("checkpoint is missing tensor {name}"));
            return;
        };
        let (tensor, kind) = match slot {
            Slot::Param(p) => {
                p.trainable = e.trainable;
                (&mut p.value, TensorKind::Param)
            }
            Slot::Buffer(b) => (b, TensorKind::Buffer),
        };
        if e.name != name || e.kind != kind || e.shape != tensor.shape() {
            failure = Some(format!(
                "checkpoint tensor {} {:?} does not match network tensor {name} {:?}",
                e.name,
                e.shape,
                tensor.shape()
            ));
            return;
        }
        for (i, v) in tensor.data_mut().iter_mut().enumerate() {
            let at = e.offset + i * 8;
            *v = f64::from_le_bytes(data[at..at + 8].try_into().expect("8-byte slice"));
        }
    });
    if let Some(msg) = failure {
        return Err(Error::Data(msg));
    }
    if let Some(extra) = entries.next() {
        return Err(Error::Data(format!("checkpoint has unexpected tensor {}", extra.name)));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(net)).map_err(|e| path_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    checkpoint_from_bytes(&std::fs::read(path).map_err(|e| path_err(path, e))?)
}
