//! Binary model files.
//!
//! Little-endian throughout: magic `NDSG`, format version (u16), layer
//! count (u16), then per layer a kind byte followed by that kind's u32
//! attribute words, then the parameter count (u64) and the raw `f32`
//! words in canonical order, then a CRC-32 of every preceding byte.

use std::io::{Read, Write};
use std::path::Path;

use super::{GraphError, LayerSpec, ModelGraph, Result};

pub const MAGIC: [u8; 4] = *b"NDSG";
pub const FORMAT_VERSION: u16 = 1;

fn encode_layer(spec: &LayerSpec, out: &mut Vec<u8>) {
    let (kind, words): (u8, Vec<usize>) = match *spec {
        LayerSpec::Conv2d { out_filters, in_channels, kernel, stride, padding } => {
            (1, vec![out_filters, in_channels, kernel.0, kernel.1, stride, padding])
        }
        LayerSpec::Dense { out_width, in_width } => (2, vec![out_width, in_width]),
        LayerSpec::BatchNorm { channels } => (3, vec![channels]),
        LayerSpec::Relu => (4, vec![]),
        LayerSpec::MaxPool => (5, vec![]),
        LayerSpec::AvgPoolGlobal => (6, vec![]),
    };
    out.push(kind);
    for w in words {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
}

/// Serializes `graph` into the model file layout.
pub fn write_model(graph: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + graph.layers().len() * 25 + graph.param_count() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(graph.layers().len() as u16).to_le_bytes());
    for l in graph.layers() {
        encode_layer(l, &mut out);
    }
    out.extend_from_slice(&(graph.param_count() as u64).to_le_bytes());
    for p in graph.params() {
        out.extend_from_slice(&p.to_bits().to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| GraphError::Truncated(format!("while reading {what}")))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn decode_layer(c: &mut Cursor<'_>) -> Result<LayerSpec> {
    let kind = c.u8("layer kind")?;
    let mut word = || c.u32("layer attributes").map(|w| w as usize);
    Ok(match kind {
        1 => {
            let (out_filters, in_channels, kh, kw, stride, padding) = (word()?, word()?, word()?, word()?, word()?, word()?);
            LayerSpec::Conv2d { out_filters, in_channels, kernel: (kh, kw), stride, padding }
        }
        2 => {
            let (out_width, in_width) = (word()?, word()?);
            LayerSpec::Dense { out_width, in_width }
        }
        3 => LayerSpec::BatchNorm { channels: word()? },
        4 => LayerSpec::Relu,
        5 => LayerSpec::MaxPool,
        6 => LayerSpec::AvgPoolGlobal,
        k => return Err(GraphError::Invalid(format!("unknown layer kind {k}"))),
    })
}

/// Parses a model file image, verifying magic, version and checksum
/// before the architecture.
pub fn read_model(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(GraphError::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(GraphError::Truncated("header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(GraphError::Version(version));
    }
    if bytes.len() < 12 {
        return Err(GraphError::Truncated("header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(GraphError::Checksum { stored, computed });
    }
    let mut c = Cursor { buf: body, at: 6 };
    let count = c.u16("layer count")?;
    let layers = (0..count).map(|_| decode_layer(&mut c)).collect::<Result<Vec<_>>>()?;
    let n = c.u64("parameter count")?;
    let n = usize::try_from(n).map_err(|_| GraphError::Truncated("parameter count overflows".into()))?;
    let raw = c.take(n.checked_mul(4).ok_or_else(|| GraphError::Truncated("parameter count overflows".into()))?, "parameters")?;
    if c.at != body.len() {
        return Err(GraphError::Invalid(format!("{} trailing bytes after parameters", body.len() - c.at)));
    }
    let params = raw.chunks_exact(4).map(|b| f32::from_bits(u32::from_le_bytes(b.try_into().expect("4 bytes")))).collect();
    ModelGraph::new(layers, params)
}

pub fn save_model(graph: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&write_model(graph))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_model(&bytes)
}
