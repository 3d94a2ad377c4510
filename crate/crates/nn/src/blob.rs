//! Versioned tagged-block binary container used for checkpoints.
//!
//! Layout: 8-byte magic, u32 format version, then a sequence of blocks
//! `[4-byte tag][u64 payload length][payload]`. All integers and floats are
//! little-endian, so files written from identical state are byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::NnError;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"FGANBLOB";
pub const FORMAT_VERSION: u32 = 1;

pub struct BlobWriter<W: Write> {
    out: W,
}

impl<W: Write> BlobWriter<W> {
    pub fn new(mut out: W) -> Result<Self, NnError> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        Ok(Self { out })
    }

    pub fn block(&mut self, tag: &[u8; 4], payload: &[u8]) -> Result<(), NnError> {
        self.out.write_all(tag)?;
        self.out.write_all(&(payload.len() as u64).to_le_bytes())?;
        self.out.write_all(payload)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), NnError> {
        self.out.flush()?;
        Ok(())
    }
}

/// Fully materialized container: tag -> payloads in file order.
#[derive(Debug)]
pub struct Blob {
    blocks: Vec<(String, Vec<u8>)>,
}

impl Blob {
    pub fn read(mut input: impl Read) -> Result<Self, NnError> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| NnError::Format("file too short for container magic".into()))?;
        if &magic != MAGIC {
            return Err(NnError::Format(format!(
                "bad container magic {:02x?}",
                magic
            )));
        }
        let mut ver = [0u8; 4];
        input
            .read_exact(&mut ver)
            .map_err(|_| NnError::Format("truncated version field".into()))?;
        let found = u32::from_le_bytes(ver);
        if found != FORMAT_VERSION {
            return Err(NnError::VersionMismatch {
                expected: FORMAT_VERSION,
                found,
            });
        }
        let mut blocks = Vec::new();
        loop {
            let mut tag = [0u8; 4];
            match input.read_exact(&mut tag) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let mut len = [0u8; 8];
            input
                .read_exact(&mut len)
                .map_err(|_| NnError::Format("truncated block header".into()))?;
            let n = u64::from_le_bytes(len) as usize;
            let mut payload = vec![0u8; n];
            input
                .read_exact(&mut payload)
                .map_err(|_| NnError::Format("truncated block payload".into()))?;
            blocks.push((String::from_utf8_lossy(&tag).into_owned(), payload));
        }
        Ok(Self { blocks })
    }

    pub fn get(&self, tag: &str) -> Option<&[u8]> {
        self.blocks
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, tag: &str) -> Result<&[u8], NnError> {
        self.get(tag)
            .ok_or_else(|| NnError::Format(format!("missing block '{tag}'")))
    }

    pub fn tags(&self) -> Vec<&str> {
        self.blocks.iter().map(|(t, _)| t.as_str()).collect()
    }
}

// ---- payload codecs ----

pub struct Enc(pub Vec<u8>);

impl Enc {
    pub fn new() -> Self {
        Enc(Vec::new())
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    pub fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.f64(*v);
        }
    }
}

impl Default for Enc {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Format("payload underrun".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn str(&mut self) -> Result<String, NnError> {
        let n = self.u64()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| NnError::Format("non-utf8 string".into()))
    }
    pub fn f64s(&mut self) -> Result<Vec<f64>, NnError> {
        let n = self.u64()? as usize;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    pub fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Serialize every parameter of a store: name-sorted table of
/// (name, dims, data).
pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut e = Enc::new();
    e.u64(store.len() as u64);
    for (name, id) in store.names() {
        let entry = store.entry(id);
        e.str(name);
        e.u64(entry.dims.len() as u64);
        for d in &entry.dims {
            e.u64(*d as u64);
        }
        e.f64s(&entry.data);
    }
    e.0
}

/// Load a parameter table into an already constructed store. Every stored
/// parameter must exist with matching dims; extra or missing names error.
pub fn decode_params_into(store: &mut ParamStore, payload: &[u8]) -> Result<(), NnError> {
    let mut d = Dec::new(payload);
    let count = d.u64()? as usize;
    if count != store.len() {
        return Err(NnError::Format(format!(
            "parameter count mismatch: file has {}, model has {}",
            count,
            store.len()
        )));
    }
    let mut seen: BTreeMap<String, ()> = BTreeMap::new();
    for _ in 0..count {
        let name = d.str()?;
        let ndims = d.u64()? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(d.u64()? as usize);
        }
        let data = d.f64s()?;
        let id = store
            .lookup(&name)
            .ok_or_else(|| NnError::Format(format!("unknown parameter '{name}' in file")))?;
        let entry = store.entry_mut(id);
        if entry.dims != dims {
            return Err(NnError::Format(format!(
                "parameter '{name}' dims {:?} do not match model {:?}",
                dims, entry.dims
            )));
        }
        entry.data.copy_from_slice(&data);
        seen.insert(name, ());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::InitKind;

    #[test]
    fn container_roundtrip() {
        let mut buf = Vec::new();
        {
            let mut w = BlobWriter::new(&mut buf).unwrap();
            w.block(b"AAAA", &[1, 2, 3]).unwrap();
            w.block(b"BBBB", &[]).unwrap();
            w.finish().unwrap();
        }
        let blob = Blob::read(&buf[..]).unwrap();
        assert_eq!(blob.get("AAAA"), Some(&[1u8, 2, 3][..]));
        assert_eq!(blob.get("BBBB"), Some(&[][..]));
        assert!(blob.get("CCCC").is_none());
    }

    #[test]
    fn truncated_file_errors() {
        let mut buf = Vec::new();
        {
            let mut w = BlobWriter::new(&mut buf).unwrap();
            w.block(b"AAAA", &[0u8; 64]).unwrap();
            w.finish().unwrap();
        }
        buf.truncate(buf.len() - 10);
        match Blob::read(&buf[..]) {
            Err(NnError::Format(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_reports_both() {
        let mut buf = Vec::new();
        {
            let mut w = BlobWriter::new(&mut buf).unwrap();
            w.block(b"AAAA", &[]).unwrap();
            w.finish().unwrap();
        }
        buf[8..12].copy_from_slice(&99u32.to_le_bytes());
        match Blob::read(&buf[..]) {
            Err(NnError::VersionMismatch { expected, found }) => {
                assert_eq!((expected, found), (FORMAT_VERSION, 99));
            }
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn params_roundtrip() {
        let mut store = ParamStore::new();
        store.register("b.w", &[2, 3], InitKind::Gaussian);
        store.register("a.w", &[4], InitKind::Zero);
        store.init_gaussian(0.1, 11);
        let bytes = encode_params(&store);

        let mut fresh = ParamStore::new();
        fresh.register("b.w", &[2, 3], InitKind::Gaussian);
        fresh.register("a.w", &[4], InitKind::Zero);
        decode_params_into(&mut fresh, &bytes).unwrap();
        assert_eq!(fresh.state_hash(), store.state_hash());

        let mut wrong = ParamStore::new();
        wrong.register("b.w", &[3, 2], InitKind::Gaussian);
        wrong.register("a.w", &[4], InitKind::Zero);
        assert!(decode_params_into(&mut wrong, &bytes).is_err());
    }
}
