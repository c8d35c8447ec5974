//! Binary container shared by the checkpoint formats.
//!
//! ```text
//! [16 bytes]  magic, ASCII, NUL padded
//! [N bytes]   compact JSON header, no raw newlines
//! [1 byte]    '\n'
//! [rest]      payload (little-endian; layout given by the header)
//! ```

use std::io::{BufRead, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Magic = [u8; 16];

pub const WIDTH_MAP_MAGIC: Magic = *b"METACONV-WIDTHS\0";
pub const KERNEL_MAGIC: Magic = *b"METACONV-KERNEL\0";
pub const TENSOR_MAGIC: Magic = *b"METACONV-TENSOR\0";
pub const FEATURE_MAGIC: Magic = *b"METACONV-FEATS1\0";
pub const TEACHER_MAGIC: Magic = *b"METACONV-LOGITS\0";

const MAX_HEADER: usize = 64 << 20;

pub fn write_container<W: Write, H: Serialize>(mut w: W, magic: &Magic, header: &H, payload: &[u8]) -> Result<()> {
    w.write_all(magic)?;
    let text = serde_json::to_string(header)?;
    debug_assert!(!text.contains('\n'));
    w.write_all(text.as_bytes())?;
    w.write_all(b"\n")?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Read magic and header; the reader is left positioned at the payload.
pub fn read_header<R: BufRead, H: DeserializeOwned>(r: &mut R, magic: &Magic, format: &'static str) -> Result<H> {
    let mut got = [0u8; 16];
    r.read_exact(&mut got)
        .map_err(|_| Error::format(format, "file shorter than magic"))?;
    if &got != magic {
        return Err(Error::format(format, "bad magic bytes"));
    }
    let mut line = Vec::new();
    r.by_ref().take(MAX_HEADER as u64).read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::format(format, "unterminated header"));
    }
    line.pop();
    serde_json::from_slice(&line).map_err(|e| Error::format(format, format!("header: {e}")))
}

pub fn read_payload<R: Read>(r: &mut R, expected_len: usize, format: &'static str) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(expected_len);
    r.read_to_end(&mut buf)?;
    if buf.len() != expected_len {
        return Err(Error::format(
            format,
            format!("payload is {} bytes, header implies {expected_len}", buf.len()),
        ));
    }
    Ok(buf)
}

pub fn f32_to_le_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn le_bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// One named tensor inside a tensor checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

/// Named `f32` tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub metadata: serde_json::Map<String, serde_json::Value>,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("TensorFile::push", format!("{shape:?}"), data.len()));
        }
        if self.tensors.iter().any(|(n, _, _)| *n == name) {
            return Err(Error::invalid(format!("duplicate tensor name {name}")));
        }
        self.tensors.push((name, shape.to_vec(), data));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::format("tensor checkpoint", format!("missing tensor {name}")))
    }

    /// Fetch a tensor and check its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let (s, d) = self.get(name)?;
        if s != shape {
            return Err(Error::shape("tensor checkpoint", format!("{name}{shape:?}"), format!("{s:?}")));
        }
        Ok(d)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, shape, data) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += data.len();
        }
        let header = TensorHeader {
            format: "f32-le".into(),
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let payload = f32_to_le_bytes(self.tensors.iter().flat_map(|(_, _, d)| d.iter().copied()));
        write_container(w, &TENSOR_MAGIC, &header, &payload)
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        const FMT: &str = "tensor checkpoint";
        let header: TensorHeader = read_header(&mut r, &TENSOR_MAGIC, FMT)?;
        if header.format != "f32-le" {
            return Err(Error::format(FMT, format!("unsupported element format {}", header.format)));
        }
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let payload = le_bytes_to_f32(&read_payload(&mut r, total * 4, FMT)?);
        let mut file = TensorFile {
            metadata: header.metadata,
            tensors: Vec::new(),
        };
        for t in header.tensors {
            let len: usize = t.shape.iter().product();
            let end = t
                .offset
                .checked_add(len)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::format(FMT, format!("tensor {} overruns payload", t.name)))?;
            file.push(t.name, &t.shape, payload[t.offset..end].to_vec())?;
        }
        Ok(file)
    }
}
