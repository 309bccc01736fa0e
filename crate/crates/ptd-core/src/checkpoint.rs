//! Checkpoint persistence.
//!
//! File layout: magic `PTDL`, version (u32 LE), header length (u64 LE),
//! UTF-8 JSON header (architecture, tensor manifest, sparsity, seed, epoch,
//! metrics), then the payload: every tensor as f32 little-endian in manifest
//! order, followed by one packed keep-bitmask per prunable tensor (bit 1 =
//! keep, least-significant bit first, each mask padded to a whole byte).
//! Save -> load -> save reproduces the file bit for bit.

use crate::arch::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::masks::MaskSet;
use crate::params::ParamSet;
use crate::tensor::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"PTDL";
pub const VERSION: u32 = 1;

/// A model with its keep-masks and training metadata; the unit of
/// persistence for the whole pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedCheckpoint<T> {
    pub arch: ArchitectureSpec,
    pub params: ParamSet<T>,
    pub masks: MaskSet,
    pub seed: u64,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of this tensor's data within the payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchitectureSpec,
    tensors: Vec<ManifestEntry>,
    sparsity: f64,
    seed: u64,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
}

fn pack_bits(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

impl<T: Scalar> MaskedCheckpoint<T> {
    /// Fresh checkpoint with dense masks.
    pub fn new(arch: ArchitectureSpec, params: ParamSet<T>, seed: u64) -> Result<Self> {
        params.matches_arch(&arch)?;
        let masks = MaskSet::dense(&params);
        Ok(MaskedCheckpoint {
            arch,
            params,
            masks,
            seed,
            epoch: 0,
            metrics: BTreeMap::new(),
        })
    }

    pub fn sparsity(&self) -> f64 {
        self.masks.sparsity()
    }

    pub fn cast<U: Scalar>(&self) -> MaskedCheckpoint<U> {
        MaskedCheckpoint {
            arch: self.arch.clone(),
            params: self.params.cast(),
            masks: self.masks.clone(),
            seed: self.seed,
            epoch: self.epoch,
            metrics: self.metrics.clone(),
        }
    }

    /// Serialize to the on-disk format (tensor data narrowed to f32).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.matches_arch(&self.arch)?;
        self.masks.matches(&self.params)?;
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        let mut payload: Vec<u8> = Vec::new();
        self.params.visit(&mut |path, _, t| {
            tensors.push(ManifestEntry {
                name: path.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.as_f32().to_le_bytes());
            }
            offset += (t.len() * 4) as u64;
        });
        for (_, mask) in self.masks.entries() {
            payload.extend_from_slice(&pack_bits(mask));
        }
        let header = Header {
            arch: self.arch.clone(),
            tensors,
            sparsity: self.masks.sparsity(),
            seed: self.seed,
            epoch: self.epoch,
            metrics: self.metrics.clone(),
        };
        let header_json = serde_json::to_string(&header)
            .map_err(|e| Error::Manifest(format!("header serialization: {e}")))?;
        let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(header_json.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                got: bytes.len(),
            });
        }
        let got_magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
        if got_magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                got: got_magic,
            });
        }
        let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        if version != VERSION {
            return Err(Error::Version {
                got: version,
                supported: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16 + header_len;
        if bytes.len() < payload_start {
            return Err(Error::Truncated {
                expected: payload_start,
                got: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::Manifest(format!("header parse: {e}")))?;
        header
            .arch
            .validate()
            .map_err(|e| Error::Manifest(format!("architecture invalid: {e}")))?;

        // The manifest must exactly mirror the canonical parameter walk.
        let reference = ParamSet::<f32>::zeros_like(&header.arch)
            .map_err(|e| Error::Manifest(format!("cannot build parameters: {e}")))?;
        let expected = reference.manifest();
        if expected.len() != header.tensors.len() {
            return Err(Error::Manifest(format!(
                "{} tensors in manifest, architecture implies {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        let mut params = ParamSet::<T>::zeros_like(&header.arch)?;
        let mut offset = 0u64;
        let mut prunable_lens = Vec::new();
        for ((name, role, shape), entry) in expected.iter().zip(&header.tensors) {
            if entry.name != *name || entry.shape != *shape {
                return Err(Error::Manifest(format!(
                    "manifest entry {} {:?} does not match expected {} {:?}",
                    entry.name, entry.shape, name, shape
                )));
            }
            if entry.offset != offset {
                return Err(Error::Manifest(format!(
                    "tensor {} at offset {}, expected {}",
                    entry.name, entry.offset, offset
                )));
            }
            let len: usize = shape.iter().product();
            offset += (len * 4) as u64;
            if role.prunable() {
                prunable_lens.push(len);
            }
        }
        let tensor_bytes = offset as usize;
        let mask_bytes: usize = prunable_lens.iter().map(|l| l.div_ceil(8)).sum();
        let expected_total = payload_start + tensor_bytes + mask_bytes;
        if bytes.len() != expected_total {
            return Err(Error::Truncated {
                expected: expected_total,
                got: bytes.len(),
            });
        }

        let payload = &bytes[payload_start..];
        let mut cursor = 0usize;
        params.visit_mut(&mut |_, _, t| {
            for v in t.data_mut() {
                let raw = f32::from_le_bytes(payload[cursor..cursor + 4].try_into().expect("4"));
                *v = T::of_f32(raw);
                cursor += 4;
            }
        });
        let mut mask_entries = Vec::new();
        let mut prunable_i = 0usize;
        params.visit(&mut |path, role, t| {
            if role.prunable() {
                let len = t.len();
                debug_assert_eq!(len, prunable_lens[prunable_i]);
                prunable_i += 1;
                let nbytes = len.div_ceil(8);
                let bits = unpack_bits(&payload[cursor..cursor + nbytes], len);
                cursor += nbytes;
                mask_entries.push((path.to_string(), bits));
            }
        });
        Ok(MaskedCheckpoint {
            arch: header.arch,
            params,
            masks: MaskSet::from_entries(mask_entries),
            seed: header.seed,
            epoch: header.epoch,
            metrics: header.metrics,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::global_magnitude_mask;
    use crate::presets;

    fn sample_checkpoint(seed: u64) -> MaskedCheckpoint<f32> {
        let arch = presets::mini_vgg(3, 12, 10);
        let params = ParamSet::<f32>::init(&arch, seed).unwrap();
        let masks = global_magnitude_mask(&params, 0.3, &MaskSet::dense(&params)).unwrap();
        let mut ckpt = MaskedCheckpoint {
            arch,
            params,
            masks,
            seed,
            epoch: 17,
            metrics: Default::default(),
        };
        ckpt.masks.apply(&mut ckpt.params).unwrap();
        ckpt.metrics.insert("val_acc".into(), 0.875);
        ckpt.metrics.insert("sparsity".into(), ckpt.sparsity());
        ckpt
    }

    #[test]
    fn save_load_save_is_bit_exact() {
        let ckpt = sample_checkpoint(3);
        let bytes = ckpt.to_bytes().unwrap();
        let loaded = MaskedCheckpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, ckpt);
        let again = loaded.to_bytes().unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn f64_round_trip_through_f32_storage() {
        let ckpt = sample_checkpoint(5).cast::<f64>();
        let bytes = ckpt.to_bytes().unwrap();
        let loaded = MaskedCheckpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_magic_is_a_distinct_error() {
        let mut bytes = sample_checkpoint(0).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            MaskedCheckpoint::<f32>::from_bytes(&bytes).unwrap_err(),
            Error::BadMagic { .. }
        ));
    }

    #[test]
    fn unsupported_version_names_supported_one() {
        let mut bytes = sample_checkpoint(0).to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
        match MaskedCheckpoint::<f32>::from_bytes(&bytes).unwrap_err() {
            Error::Version { got, supported } => {
                assert_eq!(got, 999);
                assert_eq!(supported, VERSION);
            }
            other => panic!("expected version error, got {other}"),
        }
    }

    #[test]
    fn manifest_payload_inconsistency_is_detected() {
        let ckpt = sample_checkpoint(0);
        let mut bytes = ckpt.to_bytes().unwrap();
        // drop the final byte: payload no longer matches the manifest
        bytes.pop();
        assert!(matches!(
            MaskedCheckpoint::<f32>::from_bytes(&bytes).unwrap_err(),
            Error::Truncated { .. }
        ));
        // tamper with a manifest offset inside the JSON header
        let text = String::from_utf8_lossy(&bytes).to_string();
        let _ = text;
        let header_len = u64::from_le_bytes(ckpt.to_bytes().unwrap()[8..16].try_into().unwrap());
        let mut bytes = ckpt.to_bytes().unwrap();
        let header = String::from_utf8(bytes[16..16 + header_len as usize].to_vec()).unwrap();
        let tampered = header.replacen("\"offset\":0", "\"offset\":4", 1);
        assert_ne!(header, tampered);
        bytes.splice(16..16 + header_len as usize, tampered.into_bytes());
        assert!(matches!(
            MaskedCheckpoint::<f32>::from_bytes(&bytes).unwrap_err(),
            Error::Manifest(_)
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ptdl");
        let ckpt = sample_checkpoint(9);
        ckpt.save(&path).unwrap();
        let loaded = MaskedCheckpoint::<f32>::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
    }
}
