//! Reader/writer for the safetensors container (8-byte header length, JSON
//! header, raw little-endian tensor bytes).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn f16_to_f32(bits: u16) -> f32 {
    let sign = ((bits >> 15) & 1) as u32;
    let exp = ((bits >> 10) & 0x1f) as u32;
    let frac = (bits & 0x3ff) as u32;
    let out = if exp == 0 {
        if frac == 0 {
            sign << 31
        } else {
            // Subnormal: renormalise the fraction.
            let mut e = 127 - 15 + 1;
            let mut f = frac;
            while f & 0x400 == 0 {
                f <<= 1;
                e -= 1;
            }
            (sign << 31) | ((e as u32) << 23) | ((f & 0x3ff) << 13)
        }
    } else if exp == 0x1f {
        (sign << 31) | (0xff << 23) | (frac << 13)
    } else {
        (sign << 31) | ((exp + 127 - 15) << 23) | (frac << 13)
    };
    f32::from_bits(out)
}

fn decode(dtype: &str, bytes: &[u8], name: &str) -> Result<Vec<f32>> {
    let bad = || NnError::Safetensors(format!("tensor `{name}` has a truncated buffer"));
    Ok(match dtype {
        "F32" => {
            if bytes.len() % 4 != 0 {
                return Err(bad());
            }
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
        }
        "F64" => {
            if bytes.len() % 8 != 0 {
                return Err(bad());
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")) as f32)
                .collect()
        }
        "F16" => {
            if bytes.len() % 2 != 0 {
                return Err(bad());
            }
            bytes.chunks_exact(2).map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]]))).collect()
        }
        "BF16" => {
            if bytes.len() % 2 != 0 {
                return Err(bad());
            }
            bytes
                .chunks_exact(2)
                .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16))
                .collect()
        }
        other => {
            return Err(NnError::Safetensors(format!(
                "tensor `{name}` has unsupported dtype {other}"
            )))
        }
    })
}

/// Parses a safetensors buffer; non-float tensors (e.g. `position_ids`) are skipped.
pub fn parse(bytes: &[u8]) -> Result<(HashMap<String, TensorData>, BTreeMap<String, String>)> {
    if bytes.len() < 8 {
        return Err(NnError::Safetensors("file shorter than its header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| NnError::Safetensors("header length exceeds file size".into()))?;
    let header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&bytes[8..body_start])?;
    let body = &bytes[body_start..];
    let mut tensors = HashMap::new();
    let mut metadata = BTreeMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            metadata = serde_json::from_value(value)?;
            continue;
        }
        let entry: Entry = serde_json::from_value(value)?;
        let [start, end] = entry.data_offsets;
        if start > end || end > body.len() {
            return Err(NnError::Safetensors(format!("tensor `{name}` points outside the file")));
        }
        if matches!(entry.dtype.as_str(), "I64" | "I32" | "I16" | "I8" | "U8" | "BOOL") {
            continue;
        }
        let data = decode(&entry.dtype, &body[start..end], &name)?;
        let expected: usize = entry.shape.iter().product();
        if data.len() != expected {
            return Err(NnError::Safetensors(format!(
                "tensor `{name}` holds {} values but its shape needs {expected}",
                data.len()
            )));
        }
        tensors.insert(name, TensorData { shape: entry.shape, data });
    }
    Ok((tensors, metadata))
}

pub fn read(path: &Path) -> Result<(HashMap<String, TensorData>, BTreeMap<String, String>)> {
    parse(&fs::read(path)?)
}

/// Serialises float32 tensors in the given order.
pub fn serialize(tensors: &[(String, TensorData)], metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert("__metadata__".into(), serde_json::to_value(metadata)?);
    }
    let mut offset = 0;
    for (name, t) in tensors {
        let len = t.data.len() * 4;
        let entry = Entry {
            dtype: "F32".into(),
            shape: t.shape.clone(),
            data_offsets: [offset, offset + len],
        };
        header.insert(name.clone(), serde_json::to_value(entry)?);
        offset += len;
    }
    let mut header_bytes = serde_json::to_vec(&header)?;
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write(path: &Path, tensors: &[(String, TensorData)], metadata: &BTreeMap<String, String>) -> Result<()> {
    fs::write(path, serialize(tensors, metadata)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_metadata() {
        let tensors = vec![
            ("a.weight".to_string(), TensorData { shape: vec![2, 3], data: vec![1.0, -2.5, 3.0, 0.0, 1e-7, 9.0] }),
            ("b".to_string(), TensorData { shape: vec![1], data: vec![42.0] }),
        ];
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), "pt".to_string());
        let bytes = serialize(&tensors, &meta).unwrap();
        let (back, meta_back) = parse(&bytes).unwrap();
        assert_eq!(meta_back, meta);
        for (name, t) in tensors {
            assert_eq!(back[&name], t);
        }
    }

    #[test]
    fn half_precision_decoding() {
        assert_eq!(f16_to_f32(0x3c00), 1.0);
        assert_eq!(f16_to_f32(0xc000), -2.0);
        assert_eq!(f16_to_f32(0x0001), 5.960_464_5e-8);
        assert_eq!(decode("BF16", &[0x80, 0x3f], "x").unwrap(), vec![1.0]);
    }

    #[test]
    fn rejects_truncated_files() {
        assert!(parse(&[1, 0, 0]).is_err());
        let mut bytes = 100u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(parse(&bytes).is_err());
    }
}
