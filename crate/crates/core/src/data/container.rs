//! Shared single-file container: 12-byte magic + u32 version, then a
//! length-prefixed JSON header, then a length-prefixed raw payload.
//! Volumes, label maps and checkpoints all use it.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::DataError;

const MAGIC: [u8; 12] = *b"EVIFUSEBLOB\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_container<H: Serialize>(
    path: &Path,
    header: &H,
    payload: &[u8],
) -> Result<(), DataError> {
    let json = serde_json::to_vec(header)?;
    let mut bytes = Vec::with_capacity(16 + 8 + json.len() + 8 + payload.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn read_container<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<u8>), DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let need = |expected: usize, pos: usize| -> Result<(), DataError> {
        if bytes.len() < pos + expected {
            Err(DataError::Truncated {
                path: path.to_path_buf(),
                expected: (pos + expected) as u64,
                actual: bytes.len() as u64,
            })
        } else {
            Ok(())
        }
    };

    need(16, 0)?;
    if bytes[..12] != MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(DataError::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }

    need(8, 16)?;
    let json_len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    need(json_len, 24)?;
    let header: H = serde_json::from_slice(&bytes[24..24 + json_len]).map_err(|e| {
        DataError::BadHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })?;

    let payload_pos = 24 + json_len;
    need(8, payload_pos)?;
    let payload_len =
        u64::from_le_bytes(bytes[payload_pos..payload_pos + 8].try_into().expect("8 bytes"))
            as usize;
    need(payload_len, payload_pos + 8)?;
    let payload = bytes[payload_pos + 8..payload_pos + 8 + payload_len].to_vec();
    Ok((header, payload))
}
