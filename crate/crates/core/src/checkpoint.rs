//! Binary model container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "SNNCKPT\0" | version | spec hash | spec len | spec JSON
//! | meta len | meta JSON | tensor count | { rank | dims.. | f32 data }*
//! | CRC32 of everything before
//! ```
//!
//! The spec hash is the CRC32 of the canonical spec JSON.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CheckpointError;
use crate::network::{Network, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SNNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub beta: f64,
    pub ratio: f64,
    pub n_out: usize,
    pub seed: u64,
    /// Free-form provenance (init scheme, dataset, loss, ...).
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub network: Network<f32>,
    pub meta: TrainingMeta,
}

pub fn spec_hash(spec: &NetworkSpec) -> u32 {
    crc32fast::hash(spec.canonical_text().as_bytes())
}

fn put(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<&'a str, CheckpointError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?)
            .map_err(|e| CheckpointError::Malformed(format!("text section: {e}")))
    }
}

impl ModelCheckpoint {
    pub fn new(network: Network<f32>, meta: TrainingMeta) -> Self {
        Self { network, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.network.spec.canonical_text();
        let meta = serde_json::to_string(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put(&mut out, FORMAT_VERSION);
        put(&mut out, crc32fast::hash(spec.as_bytes()));
        put(&mut out, spec.len() as u32);
        out.extend_from_slice(spec.as_bytes());
        put(&mut out, meta.len() as u32);
        out.extend_from_slice(meta.as_bytes());
        put(&mut out, self.network.params.len() as u32);
        for t in &self.network.params {
            put(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put(&mut out, d as u32);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        put(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 8 {
            return Err(CheckpointError::Truncated);
        }
        let mut r = Reader {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader {
            buf: body,
            pos: r.pos,
        };
        let hash = r.u32()?;
        let spec_text = r.text()?;
        let computed = crc32fast::hash(spec_text.as_bytes());
        if hash != computed {
            return Err(CheckpointError::SpecHash {
                found: hash,
                expected: computed,
            });
        }
        let spec: NetworkSpec = serde_json::from_str(spec_text)
            .map_err(|e| CheckpointError::Malformed(format!("spec: {e}")))?;
        let meta: TrainingMeta = serde_json::from_str(r.text()?)
            .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(
                Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?,
            );
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        let network = Network::from_parts(spec, params)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok(Self { network, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and requires it to hold exactly `expected`.
    pub fn load_for(
        path: impl AsRef<Path>,
        expected: &NetworkSpec,
    ) -> Result<Self, CheckpointError> {
        let ckpt = Self::load(path)?;
        let (found, expected) = (spec_hash(&ckpt.network.spec), spec_hash(expected));
        if found != expected {
            return Err(CheckpointError::SpecHash { found, expected });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_preset;

    fn sample() -> ModelCheckpoint {
        let net = Network::init(build_preset("lin-sp-lin-sp").unwrap(), 3).unwrap();
        let mut meta = TrainingMeta {
            epochs: 2,
            beta: 3.0,
            ratio: 2.0,
            n_out: 4,
            seed: 3,
            ..Default::default()
        };
        meta.notes.insert("init".into(), "uniform-fan-in".into());
        ModelCheckpoint::new(net, meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut c = sample();
        c.network.params[0].data_mut()[0] = f32::from_bits(0x3f80_0001);
        c.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.network.spec, c.network.spec);
        for (a, b) in back.network.params.iter().zip(&c.network.params) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
            assert_eq!(a.shape(), b.shape());
        }
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bad),
            Err(CheckpointError::Checksum { .. })
        ));
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 9]),
            Err(CheckpointError::Checksum { .. })
        ));
        assert!(matches!(
            ModelCheckpoint::from_bytes(b"hello world, not a model"),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes[..10]),
            Err(CheckpointError::Truncated)
        ));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn wrong_spec_hash_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[12] ^= 0xff;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes),
            Err(CheckpointError::SpecHash { .. })
        ));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        let other = build_preset("shallow").unwrap();
        let err = ModelCheckpoint::load_for(&path, &other).unwrap_err();
        assert!(matches!(err, CheckpointError::SpecHash { .. }));
        assert!(err.to_string().contains("spec hash"));
        ModelCheckpoint::load_for(&path, &sample().network.spec).unwrap();
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            ModelCheckpoint::load("/nonexistent/dir/m.ckpt"),
            Err(CheckpointError::Io { .. })
        ));
    }
}
