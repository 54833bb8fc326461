//! Little-endian byte plumbing shared by the model-checkpoint and cache file
//! formats. Both formats end with a CRC32 of every preceding byte, so a
//! single flipped bit anywhere is detected with a named byte offset.

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn magic(&mut self, magic: &[u8; 4]) {
        self.buf.extend_from_slice(magic);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32_slice(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Appends the CRC32 of everything written so far and returns the bytes.
    pub fn finish_with_crc(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verifies the trailing CRC up front, then yields a cursor over the
    /// payload (everything before the checksum).
    pub fn with_crc(buf: &'a [u8]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::Format {
                offset: buf.len() as u64,
                reason: "file too short to hold a checksum".into(),
            });
        }
        let body = &buf[..buf.len() - 4];
        let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Format {
                offset: (buf.len() - 4) as u64,
                reason: format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"),
            });
        }
        Ok(Self { buf: body, pos: 0 })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4], format_name: &str) -> Result<()> {
        let at = self.pos as u64;
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::Format {
                offset: at,
                reason: format!("not a {format_name} file (bad magic {got:02x?})"),
            });
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f32_vec(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(count * 4, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    /// Rejects trailing bytes after the last expected field.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("{} unexpected trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}
