//! PNUW v1 weight files.
//!
//! ```text
//! 0..4    b"PNUW"
//! 4       version (1)
//! 5..9    u32 LE header length N
//! 9..9+N  UTF-8 JSON header {kind, config, tensors: [{name, shape, offset}]}
//! ...     f32 LE payload, tensors back to back; offset is in bytes
//! last 4  u32 LE CRC32 of the payload
//! ```

use std::fs;
use std::path::Path;

use pnunet_core::baseline::{Autoencoder, AutoencoderConfig};
use pnunet_core::params::{ParamSet, ParamTensor};
use pnunet_core::reconstructor::{Reconstructor, ReconstructorConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PNUW";
pub const VERSION: u8 = 1;
const PREFIX_LEN: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Reconstructor,
    Autoencoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Serialize `params` to PNUW bytes. Values are stored as `f32`; parameters
/// produced by this crate's initializers and optimizers already sit on the
/// `f32` grid, so nothing is lost.
pub fn encode<C: Serialize>(kind: ModelKind, config: &C, params: &ParamSet) -> Vec<u8> {
    let mut offset = 0;
    let tensors = params
        .tensors()
        .iter()
        .map(|t| {
            let entry = TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            };
            offset += 4 * t.numel();
            entry
        })
        .collect();
    let header = Header {
        kind,
        config: serde_json::to_value(config).expect("config serializes"),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut payload = Vec::with_capacity(offset);
    for t in params.tensors() {
        for &v in &t.data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

/// Parse PNUW bytes. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Header, ParamSet)> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not a PNUW file (bad magic)"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(path, format!("unsupported PNUW version {}", bytes[4])));
    }
    if bytes.len() < PREFIX_LEN + 4 {
        return Err(Error::corrupt(path, "truncated before header"));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let payload_start = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&s| s + 4 <= bytes.len())
        .ok_or_else(|| Error::corrupt(path, "truncated header"))?;
    let payload_end = bytes.len() - 4;
    let payload = &bytes[payload_start..payload_end];
    let stored_crc = u32::from_le_bytes(bytes[payload_end..].try_into().unwrap());
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..payload_start])
        .map_err(|e| Error::corrupt(path, format!("header: {e}")))?;
    let expected: usize = header.tensors.iter().map(|t| 4 * t.shape.iter().product::<usize>()).sum();
    if payload.len() != expected {
        return Err(Error::corrupt(
            path,
            format!("payload is {} bytes, header describes {expected}", payload.len()),
        ));
    }
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(Error::corrupt(
            path,
            format!("checksum mismatch (stored {stored_crc:08x}, computed {crc:08x})"),
        ));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut next = 0;
    for entry in &header.tensors {
        if entry.offset != next {
            return Err(Error::corrupt(path, format!("tensor {} at offset {}, expected {next}", entry.name, entry.offset)));
        }
        let n: usize = entry.shape.iter().product();
        let data = payload[next..next + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        next += 4 * n;
        tensors.push(ParamTensor {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data,
        });
    }
    let params = ParamSet::new(tensors).map_err(|e| Error::corrupt(path, e.to_string()))?;
    Ok((header, params))
}

/// Write via a sibling temporary file and rename, so readers never see a
/// half-written file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path, kind: ModelKind) -> Result<(Header, ParamSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, params) = decode(&bytes, path)?;
    if header.kind != kind {
        return Err(Error::format(path, format!("holds {:?} weights, expected {kind:?}", header.kind)));
    }
    Ok((header, params))
}

pub fn save_reconstructor(path: &Path, model: &Reconstructor) -> Result<()> {
    write_atomic(path, &encode(ModelKind::Reconstructor, model.config(), model.params()))
}

pub fn load_reconstructor(path: &Path) -> Result<Reconstructor> {
    let (header, params) = read(path, ModelKind::Reconstructor)?;
    let config: ReconstructorConfig =
        serde_json::from_value(header.config).map_err(|e| Error::corrupt(path, format!("config: {e}")))?;
    Reconstructor::from_params(config, params).map_err(|e| Error::corrupt(path, e.to_string()))
}

pub fn save_autoencoder(path: &Path, model: &Autoencoder) -> Result<()> {
    write_atomic(path, &encode(ModelKind::Autoencoder, model.config(), model.params()))
}

pub fn load_autoencoder(path: &Path) -> Result<Autoencoder> {
    let (header, params) = read(path, ModelKind::Autoencoder)?;
    let config: AutoencoderConfig =
        serde_json::from_value(header.config).map_err(|e| Error::corrupt(path, format!("config: {e}")))?;
    Autoencoder::from_params(config, params).map_err(|e| Error::corrupt(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Reconstructor {
        Reconstructor::init(ReconstructorConfig {
            levels: 2,
            base_channels: 4,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    fn label() -> &'static Path {
        Path::new("mem.pnuw")
    }

    #[test]
    fn layout_matches_format() {
        let m = model();
        let bytes = encode(ModelKind::Reconstructor, m.config(), m.params());
        assert_eq!(&bytes[..4], b"PNUW");
        assert_eq!(bytes[4], 1);
        let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let payload = &bytes[9 + n..bytes.len() - 4];
        assert_eq!(payload.len(), 4 * m.params().numel());
        let first = f32::from_le_bytes(payload[..4].try_into().unwrap());
        assert_eq!(first as f64, m.params().tensors()[0].data[0]);
    }

    #[test]
    fn header_lists_tensors() {
        let m = model();
        let (header, _) = decode(&encode(ModelKind::Reconstructor, m.config(), m.params()), label()).unwrap();
        let names: Vec<_> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        let want: Vec<_> = m.params().tensors().iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, want);
        for (e, t) in header.tensors.iter().zip(m.params().tensors()) {
            assert_eq!(e.shape, t.shape);
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let (_, params) = decode(&encode(ModelKind::Reconstructor, m.config(), m.params()), label()).unwrap();
        for (a, b) in params.tensors().iter().zip(m.params().tensors()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn damage_is_reported() {
        let m = model();
        let good = encode(ModelKind::Reconstructor, m.config(), m.params());
        let mut v2 = good.clone();
        v2[4] = 2;
        let err = decode(&v2, label()).unwrap_err().to_string();
        assert!(err.contains("unsupported PNUW version 2"), "{err}");
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic, label()), Err(Error::Format { .. })));
        for cut in [3, 8, 20, good.len() / 2, good.len() - 1] {
            assert!(decode(&good[..cut], label()).is_err(), "cut at {cut}");
        }
        assert!(matches!(decode(&good[..good.len() - 1], label()), Err(Error::Corrupt { .. })));
    }
}
