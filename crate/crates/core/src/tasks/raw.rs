//! Raw tensor files for user-supplied data.
//!
//! Layout (little-endian): sample count u32, per-sample rank u32, that many
//! u32 extents, then `count · Π extents` `f32` words.

use std::path::Path;

use super::{Dataset, Result, TaskError, Targets};

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub count: usize,
    pub sample_shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_raw(t: &RawTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * (t.sample_shape.len() + t.data.len()));
    out.extend_from_slice(&(t.count as u32).to_le_bytes());
    out.extend_from_slice(&(t.sample_shape.len() as u32).to_le_bytes());
    for &d in &t.sample_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<RawTensor> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| TaskError::Shape("raw tensor header truncated".into()))
    };
    let count = word(0)? as usize;
    let rank = word(1)? as usize;
    let sample_shape = (0..rank).map(|i| word(2 + i).map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
    let per: usize = sample_shape.iter().product();
    let body = &bytes[4 * (2 + rank)..];
    let expected = count.checked_mul(per).and_then(|n| n.checked_mul(4));
    if expected != Some(body.len()) {
        return Err(TaskError::Shape(format!(
            "raw tensor of {count} × {sample_shape:?} needs {expected:?} data bytes, found {}",
            body.len()
        )));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok(RawTensor { count, sample_shape, data })
}

pub fn write_raw(t: &RawTensor, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, encode_raw(t))?)
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawTensor> {
    decode_raw(&std::fs::read(path)?)
}

impl Dataset {
    /// Builds a dataset from raw input images (`[C, H, W]` per sample) and
    /// raw targets. Class labels are stored as one integral value per
    /// sample.
    pub fn from_raw(inputs: &RawTensor, targets: &RawTensor, class_labels: bool) -> Result<Self> {
        let [c, h, w] = inputs.sample_shape[..] else {
            return Err(TaskError::Shape(format!("inputs must be [C, H, W] per sample, got {:?}", inputs.sample_shape)));
        };
        if targets.count != inputs.count {
            return Err(TaskError::Shape(format!("{} inputs but {} targets", inputs.count, targets.count)));
        }
        let t = if class_labels {
            let labels = targets
                .data
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(TaskError::Shape(format!("class label {v} is not a non-negative integer")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            if labels.len() != inputs.count {
                return Err(TaskError::Shape("class targets need one value per sample".into()));
            }
            Targets::Classes(labels)
        } else {
            Targets::Values { width: targets.sample_shape.iter().product(), data: targets.data.clone() }
        };
        Dataset::new([c, h, w], inputs.data.clone(), t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_and_truncation() {
        let t = RawTensor { count: 2, sample_shape: vec![1, 2, 2], data: (0..8).map(|i| i as f32 * 0.5).collect() };
        let bytes = encode_raw(&t);
        assert_eq!(decode_raw(&bytes).unwrap(), t);
        assert!(decode_raw(&bytes[..bytes.len() - 1]).is_err());
        let labels = RawTensor { count: 2, sample_shape: vec![1], data: vec![1.0, 0.0] };
        let ds = Dataset::from_raw(&t, &labels, true).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.targets(), &Targets::Classes(vec![1, 0]));
        let bad = RawTensor { count: 2, sample_shape: vec![1], data: vec![0.5, 0.0] };
        assert!(Dataset::from_raw(&t, &bad, true).is_err());
    }
}
