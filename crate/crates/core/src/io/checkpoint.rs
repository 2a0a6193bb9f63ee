use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeOp};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRSW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Byte offset into the blob.
    pub offset: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub graph: Graph,
    pub tensors: Vec<TensorEntry>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn checkpoint_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.graph.params.len());
    let mut offset = 0u64;
    for (name, t) in &model.graph.params {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape(),
            offset,
            count: t.len() as u64,
        });
        offset += 4 * t.len() as u64;
    }
    let header = CheckpointHeader {
        config: model.config.clone(),
        graph: model.graph.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len()).map_err(|_| fmt_err("header length: header exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.graph.params.values() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn required_params(graph: &Graph) -> Vec<&str> {
    let mut names = Vec::new();
    for n in &graph.nodes {
        match &n.op {
            NodeOp::Conv(c) => {
                names.push(c.weight.as_str());
                names.extend(c.bias.as_deref());
            }
            NodeOp::Sru(s) => {
                names.push(s.gamma.as_str());
                names.push(s.beta.as_str());
            }
            _ => {}
        }
    }
    names
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fmt_err("magic: expected \"MRSW\""));
    }
    if bytes.len() < 12 {
        return Err(fmt_err("header length: file ends before the fixed preamble"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(format!("version: unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let blob_start = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt_err(format!("header length: {header_len} bytes declared, file too short")))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..blob_start])
        .map_err(|e| fmt_err(format!("header: {e}")))?;
    let blob = &bytes[blob_start..];

    let mut expected = 0u64;
    for t in &header.tensors {
        if t.offset != expected {
            return Err(fmt_err(format!(
                "tensor `{}`: offset {} does not follow the previous tensor (expected {})",
                t.name, t.offset, expected
            )));
        }
        if t.shape.iter().product::<usize>() as u64 != t.count {
            return Err(fmt_err(format!("tensor `{}`: count {} does not match shape {:?}", t.name, t.count, t.shape)));
        }
        expected += 4 * t.count;
    }
    if blob.len() as u64 != expected {
        return Err(fmt_err(format!("blob length: expected {} bytes, found {}", expected, blob.len())));
    }

    let mut graph = header.graph;
    for t in &header.tensors {
        let start = t.offset as usize;
        let data: Vec<f64> = blob[start..start + 4 * t.count as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if graph.params.insert(t.name.clone(), Tensor::new(t.shape, data)?).is_some() {
            return Err(fmt_err(format!("tensor `{}`: listed twice", t.name)));
        }
    }
    let required = required_params(&graph);
    if let Some(missing) = required.iter().find(|n| !graph.params.contains_key(**n)) {
        return Err(fmt_err(format!("tensors: parameter `{missing}` is missing")));
    }
    if graph.params.len() != required.len() {
        let extra = graph.params.keys().find(|k| !required.contains(&k.as_str())).cloned().unwrap_or_default();
        return Err(fmt_err(format!("tensors: `{extra}` is not used by the graph")));
    }
    Ok(Model {
        config: header.config,
        graph,
    })
}

/// Writes through a temporary file and renames it into place.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_to_bytes(model)?;
    let tmp = path.with_extension("mrsw.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
