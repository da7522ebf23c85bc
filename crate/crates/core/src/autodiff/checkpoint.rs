//! Portable binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic    8 bytes  "DRFCKPT\0"
//! version  u32      CHECKPOINT_VERSION
//! meta     u32 length + UTF-8 bytes (free-form JSON model description)
//! count    u32      number of tensors
//! tensor   repeated `count` times:
//!          u32 name length + UTF-8 name
//!          u8  trainable flag (1 = parameter, 0 = buffer)
//!          u32 rank, then rank × u64 dimensions
//!          product(dims) × f64 values, row-major
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! Tensor names are dotted paths; the `encoder.` and `decoder.` prefixes
//! form the two model sections.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{DrfError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_store(meta: impl Into<String>, store: &ParamStore) -> Self {
        let entries = store
            .iter()
            .map(|(name, t, trainable)| {
                let tensor = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
                CheckpointEntry { name: name.to_string(), trainable, tensor }
            })
            .collect();
        Self { meta: meta.into(), entries }
    }

    /// Copies every entry into `store`; names, shapes and kinds must match exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(DrfError::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.entries.len(),
                store.len()
            )));
        }
        for e in &self.entries {
            let id = store
                .find(&e.name)
                .ok_or_else(|| DrfError::Checkpoint(format!("unexpected tensor `{}`", e.name)))?;
            if store.is_trainable(id) != e.trainable {
                return Err(DrfError::Checkpoint(format!("tensor `{}` changes kind", e.name)));
            }
            store.assign(&e.name, e.tensor.clone())?;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let body = self.body();
        w.write_all(&body)?;
        w.write_all(&Sha256::digest(&body))?;
        Ok(())
    }

    fn body(&self) -> Vec<u8> {
        let mut w = Vec::new();
        self.write_body(&mut w).expect("writing to a Vec cannot fail");
        w
    }

    fn write_body<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_str(&mut w, &self.meta)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            write_str(&mut w, &e.name)?;
            w.write_all(&[u8::from(e.trainable)])?;
            let shape = e.tensor.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for d in shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in e.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(DrfError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut cur = Cursor { bytes: &bytes[8..] };
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(DrfError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        if bytes.len() < 12 + 32 {
            return Err(DrfError::Checkpoint("truncated checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(DrfError::Checkpoint("checksum mismatch (corrupted checkpoint)".into()));
        }
        let mut cur = Cursor { bytes: &body[12..] };
        let meta = cur.string()?;
        let count = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = cur.string()?;
            let trainable = cur.take(1)?[0] == 1;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
            let raw = cur.take(n.and_then(|n| n.checked_mul(8)).ok_or_else(|| truncated(()))?)?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            entries.push(CheckpointEntry { name, trainable, tensor: Tensor::new(shape, data)? });
        }
        if !cur.bytes.is_empty() {
            return Err(DrfError::Checkpoint("trailing bytes in checkpoint".into()));
        }
        Ok(Self { meta, entries })
    }

    /// Hex SHA-256 of the serialised checkpoint.
    pub fn checksum(&self) -> String {
        hex_digest(&self.body())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn truncated<E>(_: E) -> DrfError {
    DrfError::Checkpoint("truncated checkpoint".into())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Bounds-checked reader over an in-memory body.
struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.bytes.len() {
            return Err(truncated(()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DrfError::Checkpoint("invalid UTF-8 in checkpoint".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("encoder.w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        s.add_buffer("decoder.bn.mean", Tensor::new(vec![1, 2], vec![0.5, -0.25]).unwrap());
        s
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 1..40)) {
            let store = sample_store(&values);
            let ck = Checkpoint::from_store("{\"k\":4}", &store);
            let bytes = ck.to_bytes();
            let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
            prop_assert_eq!(back.meta.as_str(), "{\"k\":4}");
            for (a, b) in back.entries[0].tensor.data().iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_wrong_version_and_magic() {
        let ck = Checkpoint::from_store("", &sample_store(&[1.0]));
        let mut bytes = ck.to_bytes();
        bytes[8] = 9;
        assert!(Checkpoint::read_from(bytes.as_slice()).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(Checkpoint::read_from(bytes.as_slice()).is_err());
    }

    #[test]
    fn load_checks_layout() {
        let ck = Checkpoint::from_store("", &sample_store(&[1.0, 2.0]));
        let mut same = sample_store(&[0.0, 0.0]);
        ck.load_into(&mut same).unwrap();
        assert_eq!(same.get(same.find("encoder.w").unwrap()).data(), &[1.0, 2.0]);
        let mut other = sample_store(&[0.0, 0.0, 0.0]);
        assert!(ck.load_into(&mut other).is_err());
    }
}
