//! AITCKPT1: an ordered archive of named, typed arrays.
//!
//! Layout: magic, u32 entry count, then per entry a u16 name length, the
//! UTF-8 name, a u8 dtype, a u8 rank, `rank` u32 extents and the raw
//! little-endian values. dtype 0 is f32; 1 (raw bytes) and 2 (u64) carry
//! the config snapshot and counters.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CKPT_MAGIC: &[u8; 8] = b"AITCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    Bytes(Vec<u8>),
    U64(Vec<u64>),
}

impl Entry {
    pub fn from_tensor(t: &Tensor) -> Self {
        Entry::F32 {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| x as f32).collect(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            Entry::F32 { .. } => 0,
            Entry::Bytes(_) => 1,
            Entry::U64(_) => 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, Entry)] {
        &self.entries
    }

    pub fn push(&mut self, name: impl Into<String>, e: Entry) {
        self.entries.push((name.into(), e));
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.push(name, Entry::from_tensor(t));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    fn missing(name: &str) -> Error {
        Error::Format {
            path: Default::default(),
            reason: format!("checkpoint has no usable entry '{name}'"),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        match self.get(name) {
            Some(Entry::F32 { shape, data }) => Tensor::new(shape, data.iter().map(|&x| x as Scalar).collect()),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.get(name) {
            Some(Entry::U64(v)) if v.len() == 1 => Ok(v[0]),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Entry::Bytes(b)) => Ok(b),
            _ => Err(Self::missing(name)),
        }
    }

    /// Names with the given prefix, prefix stripped, in archive order.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter_map(move |(n, _)| n.strip_prefix(prefix))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::Config(format!("checkpoint entry name too long: {name}")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(e.dtype());
            let shape = match e {
                Entry::F32 { shape, .. } => shape.clone(),
                Entry::Bytes(b) => vec![b.len()],
                Entry::U64(v) => vec![v.len()],
            };
            out.push(shape.len() as u8);
            for &d in &shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match e {
                Entry::F32 { data, .. } => data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Entry::Bytes(b) => out.extend_from_slice(b),
                Entry::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CKPT_MAGIC {
            return Err(r.format("bad magic"));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.format("entry name is not UTF-8"))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let e = match dtype {
                0 => Entry::F32 {
                    data: r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                    shape,
                },
                1 if rank == 1 => Entry::Bytes(r.take(n)?.to_vec()),
                2 if rank == 1 => Entry::U64(r.take(n * 8)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => return Err(r.format(&format!("unsupported dtype {dtype} (rank {rank}) for '{name}'"))),
            };
            entries.push((name, e));
        }
        if r.pos != bytes.len() {
            return Err(r.format("trailing bytes after last entry"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.into(),
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn format(&self, reason: &str) -> Error {
        Error::Format {
            path: self.path.into(),
            reason: reason.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push_tensor("param/w", &Tensor::new(&[2, 2], vec![1.0, -0.5, 3.25, 0.0]).unwrap());
        c.push("config", Entry::Bytes(b"seed = 1\n".to_vec()));
        c.push("state/step", Entry::U64(vec![42]));
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().encode().unwrap();
        let back = Checkpoint::decode(&bytes, "mem").unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.u64("state/step").unwrap(), 42);
        assert_eq!(back.tensor("param/w").unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn layout_of_single_entry() {
        let mut c = Checkpoint::new();
        c.push_tensor("a", &Tensor::scalar(1.0));
        let b = c.encode().unwrap();
        let mut expect = b"AITCKPT1".to_vec();
        expect.extend([1, 0, 0, 0, 1, 0, b'a', 0, 1, 1, 0, 0, 0]);
        expect.extend(1.0f32.to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().encode().unwrap();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1], "x"), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad, "x"), Err(Error::Format { .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra, "x"), Err(Error::Format { .. })));
    }
}
