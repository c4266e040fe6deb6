//! Little-endian primitives shared by the dataset, grid and checkpoint formats.

use crate::error::DecodeError;

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn with_capacity(n: usize) -> Self {
        Self { buf: Vec::with_capacity(n) }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32_slice(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.f32(*x);
        }
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated { context })?;
        if end > self.data.len() {
            return Err(DecodeError::Truncated { context });
        }
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<(), DecodeError> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if found != expected {
            return Err(DecodeError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<(), DecodeError> {
        let found = self.u32("version")?;
        if found != expected {
            return Err(DecodeError::Version { expected, found });
        }
        Ok(())
    }

    pub fn u8(&mut self, c: &'static str) -> Result<u8, DecodeError> {
        Ok(self.take(1, c)?[0])
    }

    pub fn u16(&mut self, c: &'static str) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2, c)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, c: &'static str) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, c)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, c: &'static str) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8, c)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, c: &'static str) -> Result<f32, DecodeError> {
        Ok(f32::from_le_bytes(self.take(4, c)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, c: &'static str) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8, c)?.try_into().unwrap()))
    }

    pub fn f32_vec(&mut self, n: usize, c: &'static str) -> Result<Vec<f32>, DecodeError> {
        let bytes = self.take(n.checked_mul(4).ok_or(DecodeError::Truncated { context: c })?, c)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self, context: &'static str) -> Result<(), DecodeError> {
        if self.pos != self.data.len() {
            return Err(DecodeError::TrailingBytes { context });
        }
        Ok(())
    }
}

/// Hex SHA-256 of a byte buffer; used for artifact provenance.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

impl Reader<'_> {
    pub fn is_at_end(&self) -> bool {
        self.pos >= self.data.len()
    }
}
