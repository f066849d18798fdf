//! Binary container shared by VAE and training checkpoints: magic, version,
//! kind tag, little-endian payload, SHA-256 trailer over everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamGroup, ParamStore, Real, Tensor};

const MAGIC: &[u8; 4] = b"PVCK";
const DIGEST_LEN: usize = 32;

#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(kind: &[u8; 4], version: u32) -> Self {
        let mut e = Self { buf: Vec::new() };
        e.buf.extend_from_slice(MAGIC);
        e.buf.extend_from_slice(kind);
        e.u32(version);
        e
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Name, group tag, shape and values of every entry.
    pub fn store<T: Real>(&mut self, store: &ParamStore<T>) {
        self.store_groups(store, &ParamGroup::ALL);
    }

    /// Only the blocks whose group is listed, in store order.
    pub fn store_groups<T: Real>(&mut self, store: &ParamStore<T>, groups: &[ParamGroup]) {
        let keep = |g: ParamGroup| groups.contains(&g);
        self.u64(store.entries().iter().filter(|e| keep(e.group)).count() as u64);
        for e in store.entries().iter().filter(|e| keep(e.group)) {
            self.str(&e.name);
            self.u8(e.group.tag());
            self.u32(e.value.rank() as u32);
            for &d in e.value.shape() {
                self.u64(d as u64);
            }
            for &v in e.value.data() {
                self.f64(v.as_f64());
            }
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }

    pub fn write(self, path: &Path) -> Result<()> {
        let bytes = self.finish();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    /// Verifies magic, checksum, kind and version; the cursor is left at the
    /// start of the payload.
    pub fn open(bytes: &'a [u8], kind: &[u8; 4], what: &'static str, version: u32) -> Result<Self> {
        if bytes.len() < 12 + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Integrity(format!("{what}: not a checkpoint file")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity(format!("{what}: checksum mismatch")));
        }
        if &body[4..8] != kind {
            return Err(Error::Integrity(format!("{what}: wrong checkpoint kind")));
        }
        let mut d = Self { buf: body, pos: 8 };
        let found = d.u32()?;
        if found != version {
            return Err(Error::Version {
                what,
                found,
                expected: version,
            });
        }
        Ok(d)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity("truncated checkpoint payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(Error::Integrity("implausible length in checkpoint".into()));
        }
        Ok(n)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("invalid utf-8 in checkpoint".into()))
    }

    /// Reads a stored parameter set and copies it into `store`, which must
    /// contain exactly the same names, groups and shapes.
    pub fn store_into<T: Real>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.store_groups_into(store, &ParamGroup::ALL)
    }

    pub fn store_groups_into<T: Real>(&mut self, store: &mut ParamStore<T>, groups: &[ParamGroup]) -> Result<()> {
        let n = self.len()?;
        let expected = store.entries().iter().filter(|e| groups.contains(&e.group)).count();
        if n != expected {
            return Err(Error::Integrity(format!(
                "checkpoint holds {n} parameter blocks, model expects {expected}"
            )));
        }
        for e in store.entries_mut().iter_mut().filter(|e| groups.contains(&e.group)) {
            let name = self.str()?;
            let group = ParamGroup::from_tag(self.u8()?)
                .ok_or_else(|| Error::Integrity(format!("unknown group tag for `{name}`")))?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if name != e.name || group != e.group {
                return Err(Error::Integrity(format!(
                    "parameter block `{name}` found where `{}` was expected",
                    e.name
                )));
            }
            if shape != e.value.shape() {
                return Err(Error::shape("load checkpoint block", e.value.shape(), &shape));
            }
            let data = (0..e.value.numel()).map(|_| self.f64().map(T::lit)).collect::<Result<Vec<_>>>()?;
            e.value = Tensor::from_vec(&shape, data)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Integrity("trailing bytes in checkpoint".into()));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip_and_corruption() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", ParamGroup::Base, Tensor::from_vec(&[2, 2], vec![0.1, -2.5, 3.0, 1e-7]).unwrap());
        let mut e = Encoder::new(b"TEST", 3);
        e.store(&s);
        e.str("tail");
        let bytes = e.finish();

        let mut loaded = s.clone();
        loaded.get_mut(crate::numerics::ParamId(0)).fill(0.0);
        let mut d = Decoder::open(&bytes, b"TEST", "test", 3).unwrap();
        d.store_into(&mut loaded).unwrap();
        assert_eq!(d.str().unwrap(), "tail");
        d.finish().unwrap();
        assert_eq!(loaded, s);

        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(Decoder::open(&bad, b"TEST", "test", 3), Err(Error::Integrity(_))));
        assert!(matches!(Decoder::open(&bytes, b"TEST", "test", 4), Err(Error::Version { .. })));
    }
}
