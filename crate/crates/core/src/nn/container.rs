//! Portable model container.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   b"RSQMODEL"
//! header_len u64 LE    length of the JSON header in bytes
//! header     JSON      ModelHeader (format version, kind, seed, tensor table, ...)
//! payload    f64 LE    every tensor's data, in header declaration order
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RSQMODEL";
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format_version: u32,
    /// `"cnn"` or `"lstm"`.
    pub kind: String,
    /// `"shared"` or `"separate"` for sequence models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// Named parameter groups; tensor names are prefixed `"<group>/"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<String>,
    pub seed: u64,
    /// Architecture hyperparameters needed to rebuild the model.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `header` (its tensor table is rebuilt from `tensors`) and the
/// tensor payload.
pub fn write_container<W: Write>(
    mut writer: W,
    mut header: ModelHeader,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    header.format_version = FORMAT_VERSION;
    header.tensors = tensors
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&header).map_err(|e| Error::Container(e.to_string()))?;
    let io = |e: std::io::Error| Error::Container(format!("write failed: {e}"));
    writer.write_all(MAGIC).map_err(io)?;
    writer
        .write_all(&(json.len() as u64).to_le_bytes())
        .map_err(io)?;
    writer.write_all(&json).map_err(io)?;
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        buf.reserve(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        writer.write_all(&buf).map_err(io)?;
    }
    writer.flush().map_err(io)
}

/// Reads a container written by [`write_container`].
pub fn read_container<R: Read>(mut reader: R) -> Result<(ModelHeader, Vec<(String, Tensor)>)> {
    let io = |e: std::io::Error| Error::Container(format!("read failed: {e}"));
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Container("not a model container (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    reader.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER_BYTES {
        return Err(Error::Container(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    reader.read_exact(&mut json).map_err(io)?;
    let header: ModelHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Container(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Container(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        reader
            .read_exact(&mut raw)
            .map_err(|e| Error::Container(format!("tensor {}: {e}", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(Error::Container(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, tensors))
}

/// Looks up tensors by name in declaration order, checking shapes.
pub(crate) fn take_tensors(
    tensors: Vec<(String, Tensor)>,
    targets: Vec<(String, &mut Tensor)>,
) -> Result<()> {
    if tensors.len() != targets.len() {
        return Err(Error::Container(format!(
            "expected {} tensors, found {}",
            targets.len(),
            tensors.len()
        )));
    }
    for ((name, t), (want, slot)) in tensors.into_iter().zip(targets) {
        if name != want {
            return Err(Error::Container(format!("expected tensor {want}, found {name}")));
        }
        if t.shape() != slot.shape() {
            return Err(Error::Container(format!(
                "tensor {name}: shape {:?} does not match configured {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}
