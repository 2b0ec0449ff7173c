//! Weights file.
//!
//! Layout: magic `TRRW`, `u16` version, `u32` header length, a JSON header of
//! that length, every tensor as little-endian `f64` in header order, then a
//! CRC32 of all preceding bytes. The header carries the model config, tensor
//! names, shapes and payload byte offsets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tensor_specs, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::numkit::Mat;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"TRRW";
pub const WEIGHTS_VERSION: u16 = 1;

const PREAMBLE: usize = 4 + 2 + 4;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
}

pub fn encode_weights(cfg: &ModelConfig, w: &ModelWeights) -> Result<Vec<u8>> {
    w.check_shapes(cfg)?;
    let mut payload = Vec::with_capacity(w.num_params() * 8);
    let mut entries = Vec::new();
    for (spec, t) in tensor_specs(cfg).into_iter().zip(w.tensors()) {
        entries.push(TensorEntry {
            name: spec.name,
            shape: [t.rows(), t.cols()],
            offset: payload.len() as u64,
        });
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header {
        config: cfg.clone(),
        tensors: entries,
        payload_bytes: payload.len() as u64,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len() + 4);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights)> {
    if bytes.len() < PREAMBLE + 4 {
        return Err(Error::format(bytes.len() as u64, "file shorter than preamble"));
    }
    if &bytes[..4] != WEIGHTS_MAGIC {
        return Err(Error::format(0, "bad magic, not a weights file"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != WEIGHTS_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let crc_at = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[crc_at..].try_into().unwrap());
    if crc32fast::hash(&bytes[..crc_at]) != stored {
        return Err(Error::format(crc_at as u64, "checksum mismatch"));
    }
    let bytes = &bytes[..crc_at];
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(6, format!("header of {header_len} bytes runs past end of file")))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::format(PREAMBLE as u64, format!("bad header: {e}")))?;
    let cfg = header.config;
    cfg.validate()
        .map_err(|e| Error::format(PREAMBLE as u64, format!("header config invalid: {e}")))?;

    let payload = &bytes[header_end..];
    if (payload.len() as u64) != header.payload_bytes {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_bytes
            ),
        ));
    }

    let specs = tensor_specs(&cfg);
    if specs.len() != header.tensors.len() {
        return Err(Error::format(
            PREAMBLE as u64,
            format!(
                "header lists {} tensors, config implies {}",
                header.tensors.len(),
                specs.len()
            ),
        ));
    }
    let mut tensors = Vec::with_capacity(specs.len());
    for (spec, entry) in specs.iter().zip(&header.tensors) {
        if entry.name != spec.name || entry.shape != [spec.rows, spec.cols] {
            return Err(Error::format(
                PREAMBLE as u64,
                format!(
                    "tensor {} {:?} does not match config ({} {}x{})",
                    entry.name, entry.shape, spec.name, spec.rows, spec.cols
                ),
            ));
        }
        let start = usize::try_from(entry.offset).unwrap_or(usize::MAX);
        let end = start.saturating_add(spec.len() * 8);
        if end > payload.len() {
            return Err(Error::format(
                (header_end + start.min(payload.len())) as u64,
                format!("tensor {} extends past payload", entry.name),
            ));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Mat::from_vec(spec.rows, spec.cols, data)?);
    }
    let w = ModelWeights::from_tensors(&cfg, tensors)?;
    Ok((cfg, w))
}

pub fn save_weights(cfg: &ModelConfig, w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(cfg, w)?)?;
    Ok(())
}

/// Loads a weights file along with the config stored in it.
pub fn load_weights(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelWeights)> {
    decode_weights(&fs::read(path)?)
}

/// Loads a weights file and checks its architecture against `expected`.
pub fn load_weights_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelWeights> {
    let (found, w) = load_weights(path)?;
    let dims = [
        ("d", expected.d, found.d),
        ("k", expected.k, found.k),
        ("d_h", expected.d_h, found.d_h),
        ("n_heads", expected.n_heads, found.n_heads),
        ("n_encoders", expected.n_encoders, found.n_encoders),
        ("input rows", expected.input_rows(), found.input_rows()),
    ];
    for (name, e, f) in dims {
        if e != f {
            return Err(Error::Config(format!(
                "weights file has {name} = {f}, expected {name} = {e}"
            )));
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            n_heads: 2,
            n_encoders: 2,
            ..ModelConfig::tiny()
        };
        let w = init_weights(&cfg, 5).unwrap();
        let bytes = encode_weights(&cfg, &w).unwrap();
        let (cfg2, w2) = decode_weights(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(w.to_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   w2.to_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let cfg = ModelConfig::tiny();
        let w = init_weights(&cfg, 1).unwrap();
        let bytes = encode_weights(&cfg, &w).unwrap();
        for cut in [0, 3, 9, PREAMBLE + 5, bytes.len() - 1] {
            assert!(
                matches!(decode_weights(&bytes[..cut]), Err(Error::Format { .. })),
                "cut at {cut}"
            );
        }
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 0x40;
        assert!(matches!(decode_weights(&flipped), Err(Error::Format { .. })));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_weights(&bad_magic), Err(Error::Format { offset: 0, .. })));
        // a header edit that still parses is caught by the checksum
        let text = String::from_utf8_lossy(&bytes).replace("\"loss_sigma\":1.0", "\"loss_sigma\":2.0");
        assert_ne!(text.as_bytes(), &bytes[..]);
        assert!(matches!(
            decode_weights(text.as_bytes()),
            Err(Error::Format { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn any_bit_flip_is_rejected(pos in 0usize..10_000, bit in 0u8..8) {
            let cfg = ModelConfig { k: 3, d: 4, d_h: 4, ..ModelConfig::tiny() };
            let w = init_weights(&cfg, 2).unwrap();
            let mut bytes = encode_weights(&cfg, &w).unwrap();
            let i = pos % bytes.len();
            bytes[i] ^= 1 << bit;
            let rejected = matches!(decode_weights(&bytes), Err(Error::Format { .. }));
            proptest::prop_assert!(rejected, "flip at byte {}", i);
        }
    }

    #[test]
    fn mismatched_d_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.trrw");
        let cfg = ModelConfig {
            d: 4,
            ..ModelConfig::tiny()
        };
        save_weights(&cfg, &init_weights(&cfg, 0).unwrap(), &path).unwrap();
        let err = load_weights_for(&path, &ModelConfig::tiny()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("d = 4") && msg.contains("d = 8"), "{msg}");
    }
}
