//! Checkpoint container: `LENIKIT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::Rng;

const MAGIC: &[u8; 8] = b"LENIKIT1";
const VERSION: u32 = 1;

/// Free-form run metadata stored next to the weights.
pub type Meta = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Byte offset from the start of the payload.
    pub offset: u64,
    /// Number of `f64` values.
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub model: ModelConfig,
    pub meta: Meta,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(model: &mut Model, meta: &Meta) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t, _) in model.tensors_mut() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().as_array(),
            offset: payload.len() as u64,
            len: t.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: VERSION,
        model: model.config().clone(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(model: &mut Model, meta: &Meta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, Meta)> {
    let bad = |m: String| Error::Format(m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a LENIKIT1 checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("header length {hlen} exceeds file size {}", bytes.len())))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(format!("checkpoint header: {e}")))?;
    if header.version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", header.version)));
    }
    let payload = &bytes[hend..];
    let mut model = Model::build(&header.model, &Rng::new(0)).map_err(|e| bad(format!("checkpoint model: {e}")))?;
    let mut entries: BTreeMap<&str, &TensorEntry> = header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    for (name, t, _) in model.tensors_mut() {
        let e = entries
            .remove(name.as_str())
            .ok_or_else(|| bad(format!("manifest lacks tensor {name}")))?;
        if e.shape != t.shape().as_array() || e.len != t.len() as u64 {
            return Err(bad(format!(
                "tensor {name}: manifest shape {:?} does not match model {:?}",
                e.shape,
                t.shape().as_array()
            )));
        }
        let start = usize::try_from(e.offset).map_err(|_| bad(format!("tensor {name}: offset overflow")))?;
        let end = e
            .len
            .checked_mul(8)
            .and_then(|l| usize::try_from(l).ok())
            .and_then(|l| start.checked_add(l))
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| {
                bad(format!(
                    "tensor {name}: offset {} + {} values beyond payload of {} bytes",
                    e.offset,
                    e.len,
                    payload.len()
                ))
            })?;
        for (dst, src) in t.data_mut().iter_mut().zip(payload[start..end].chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().expect("8 bytes"));
        }
    }
    if let Some(extra) = entries.keys().next() {
        return Err(bad(format!("manifest has unknown tensor {extra}")));
    }
    Ok((model, header.meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Meta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and requires its model config to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<(Model, Meta)> {
    let (model, meta) = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(Error::Config(format!(
            "{} was saved for a different model config",
            path.display()
        )));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{ActivationKind, Mode};
    use crate::tensor::Tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            stage_widths: vec![3, 4],
            blocks_per_stage: vec![1, 1],
            input_size: 8,
            ..ModelConfig::resnet_small()
        }
        .with_activation(ActivationKind::prelu())
        .with_leni([1])
    }

    fn trained_ish() -> Model {
        let mut m = Model::build(&small(), &Rng::new(3)).unwrap();
        let mut r = Rng::new(4);
        let x = Tensor::from_vec((2, 1, 8, 8), (0..128).map(|_| r.normal()).collect()).unwrap();
        // move running stats away from their init
        m.forward(&x, Mode::Train, None).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = trained_ish();
        let mut meta = Meta::new();
        meta.insert("final_test_acc".into(), 0.5.into());
        let bytes = encode_checkpoint(&mut m, &meta).unwrap();
        let (mut back, meta2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(meta2, meta);
        for ((na, a, _), (nb, b, _)) in m.tensors_mut().into_iter().zip(back.tensors_mut()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{na}");
        }
        assert_eq!(encode_checkpoint(&mut back, &meta2).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let mut m = trained_ish();
        let bytes = encode_checkpoint(&mut m, &Meta::new()).unwrap();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(decode_checkpoint(&b), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 8]), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes[..20]), Err(Error::Format(_))));
        let mut b = bytes.clone();
        b[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_checkpoint(&b), Err(Error::Format(_))));
    }

    #[test]
    fn offset_beyond_file_is_format_error() {
        let mut m = trained_ish();
        let bytes = encode_checkpoint(&mut m, &Meta::new()).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        header.tensors[0].offset = 1 << 40;
        let json = serde_json::to_vec(&header).unwrap();
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&(json.len() as u64).to_le_bytes());
        b.extend_from_slice(&json);
        b.extend_from_slice(&bytes[16 + hlen..]);
        let err = decode_checkpoint(&b).unwrap_err();
        assert!(matches!(err, Error::Format(_)) && err.to_string().contains("beyond"), "{err}");
    }

    #[test]
    fn config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ck");
        save_checkpoint(&mut trained_ish(), &Meta::new(), &p).unwrap();
        assert!(load_checkpoint_for(&p, &small()).is_ok());
        let other = small().with_leni([0]);
        assert!(matches!(load_checkpoint_for(&p, &other), Err(Error::Config(_))));
    }
}
