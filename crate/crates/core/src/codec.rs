//! Little-endian binary framing shared by the model and dataset files.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length fits in u32"));
    }

    pub fn str(&mut self, s: &str) {
        self.len(s.len());
        self.bytes(s.as_bytes());
    }

    /// Extent list, then row-major `f32` values.
    pub fn tensor(&mut self, t: &Tensor) {
        self.len(t.rank());
        for &d in t.shape() {
            self.len(d);
        }
        for &v in t.data() {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    /// Appends the CRC-32 of everything written so far.
    pub fn finish_with_crc(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupt(format!(
                "truncated: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Corrupt(format!("invalid flag byte {b}"))),
        }
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("string is not UTF-8".into()))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.len()?;
        if rank == 0 || rank > 8 {
            return Err(Error::Corrupt(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Corrupt(format!("tensor extents {shape:?} exceed the payload")))?;
        let raw = self.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Splits `bytes` into body and trailing CRC, verifying the checksum.
pub(crate) fn check_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Corrupt("truncated: no checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Corrupt(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x}); file truncated or damaged"
        )));
    }
    Ok(body)
}

/// Reads and checks a 4-byte magic and a version number.
pub(crate) fn check_header(bytes: &[u8], magic: &[u8; 4], version: u32) -> Result<()> {
    let mut r = Reader::new(bytes);
    let m = r.take(4).map_err(|_| Error::Corrupt("truncated header".into()))?;
    if m != magic {
        return Err(Error::Corrupt(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(magic)
        )));
    }
    let found = r.u32().map_err(|_| Error::Corrupt("truncated header".into()))?;
    if found != version {
        return Err(Error::Version {
            expected: version,
            found,
        });
    }
    Ok(())
}
