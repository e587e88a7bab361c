// Checkpoint file layout (safetensors-compatible):
//
//   [u64 LE header length N][N bytes UTF-8 JSON header][raw LE payloads]
//
// The header maps tensor name -> {"dtype", "shape", "data_offsets"} where the
// offsets are relative to the first payload byte. An optional
// "__metadata__" entry holds a flat string map.
//
// F16 and BF16 payloads are upcast to f32 on load.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use half::{bf16, f16};
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

/// On-disk element type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Dtype {
    #[default]
    F32,
    F16,
    BF16,
}

impl Dtype {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::BF16),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }
}

#[derive(Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

#[derive(Serialize)]
struct TensorInfoOut<'a> {
    dtype: &'a str,
    shape: &'a [usize],
    data_offsets: [u64; 2],
}

/// Header entries in file order, duplicates preserved so they can be reported.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterSet> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte slice"));
    let header_end = 8u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            Error::MalformedHeader(format!(
                "declared header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })? as usize;
    let header_bytes = &bytes[8..header_end];
    let payload = &bytes[header_end..];

    let RawHeader(entries) = serde_json::from_slice(header_bytes).map_err(|e| Error::MalformedHeader(e.to_string()))?;

    let mut seen = HashSet::new();
    let mut params = ParameterSet::new();
    let mut metadata = None;

    for (name, value) in entries {
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateTensor(name));
        }
        if name == METADATA_KEY {
            let map: BTreeMap<String, String> =
                serde_json::from_value(value).map_err(|e| Error::MalformedHeader(format!("{METADATA_KEY}: {e}")))?;
            metadata = Some(map);
            continue;
        }
        let info: TensorInfo =
            serde_json::from_value(value).map_err(|e| Error::MalformedHeader(format!("tensor `{name}`: {e}")))?;
        let dtype = Dtype::parse(&info.dtype).ok_or_else(|| Error::UnsupportedDtype {
            name: name.clone(),
            dtype: info.dtype.clone(),
        })?;
        let numel: usize = info.shape.iter().product();
        if numel == 0 {
            return Err(Error::EmptyTensor(name));
        }
        let [begin, end] = info.data_offsets;
        if begin > end {
            return Err(Error::MalformedHeader(format!(
                "tensor `{name}` has inverted offsets [{begin}, {end}]"
            )));
        }
        if end > payload.len() as u64 {
            return Err(Error::TruncatedPayload {
                name,
                end,
                available: payload.len() as u64,
            });
        }
        let expected = (numel * dtype.size()) as u64;
        if end - begin != expected {
            return Err(Error::MalformedHeader(format!(
                "tensor `{name}` spans {} bytes, shape {:?} as {} needs {expected}",
                end - begin,
                info.shape,
                dtype.as_str()
            )));
        }
        let raw = &payload[begin as usize..end as usize];
        let data = decode_payload(raw, dtype);
        params.insert(name, Tensor::new(info.shape, data)?)?;
    }

    if params.is_empty() {
        return Err(Error::NoTensors);
    }
    params.set_metadata(metadata);
    Ok(params)
}

fn decode_payload(raw: &[u8], dtype: Dtype) -> Vec<f32> {
    match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => raw
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => raw
            .chunks_exact(2)
            .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    }
}

/// Writes `params` as F32.
pub fn save_checkpoint(params: &ParameterSet, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_as(params, path, Dtype::F32)
}

/// Writes `params`, downcasting to `dtype` when it is a half-precision type.
pub fn save_checkpoint_as(params: &ParameterSet, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_checkpoint(params: &ParameterSet, dtype: Dtype) -> Result<Vec<u8>> {
    if params.is_empty() {
        return Err(Error::NoTensors);
    }
    let mut header = serde_json::Map::new();
    if let Some(meta) = params.metadata() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(meta).expect("string map serializes"),
        );
    }
    let mut offset = 0u64;
    for (name, tensor) in params.iter() {
        if tensor.numel() == 0 {
            return Err(Error::EmptyTensor(name.to_string()));
        }
        let len = (tensor.numel() * dtype.size()) as u64;
        let info = TensorInfoOut {
            dtype: dtype.as_str(),
            shape: tensor.shape(),
            data_offsets: [offset, offset + len],
        };
        header.insert(
            name.to_string(),
            serde_json::to_value(info).expect("header entry serializes"),
        );
        offset += len;
    }
    let mut header_bytes = serde_json::to_vec(&header).expect("header serializes");
    // pad with spaces to an 8-byte boundary, as safetensors writers do
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, tensor) in params.iter() {
        match dtype {
            Dtype::F32 => {
                for v in tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F16 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&f16::from_f32(v).to_le_bytes());
                }
            }
            Dtype::BF16 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&bf16::from_f32(v).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}
