use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Mixes a base seed with a tag (splitmix64 finalizer).
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
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

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    /// Appends the CRC32 of everything written so far and returns the buffer.
    pub fn finish_with_crc(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    /// Checks magic, version and the CRC32 trailer before handing out a reader
    /// positioned after the version field.
    pub fn open(
        buf: &'a [u8],
        magic: &[u8],
        version: u32,
        what: &'static str,
    ) -> Result<ByteReader<'a>> {
        if buf.len() < magic.len() || &buf[..magic.len()] != magic {
            return Err(Error::BadMagic { expected: what });
        }
        if buf.len() < magic.len() + 4 {
            return Err(Error::Truncated(format!("{what} header")));
        }
        let found = u32::from_le_bytes(buf[magic.len()..magic.len() + 4].try_into().unwrap());
        if found != version {
            return Err(Error::VersionMismatch {
                found,
                supported: version,
            });
        }
        Ok(ByteReader {
            buf,
            pos: magic.len() + 4,
            what,
        })
    }

    /// Validates the trailing checksum. Called once the declared sizes are
    /// known so that short files report truncation rather than corruption.
    pub fn verify_crc(&self, expected_len: usize) -> Result<()> {
        if self.buf.len() < expected_len + 4 {
            return Err(Error::Truncated(format!(
                "{}: expected {} bytes, found {}",
                self.what,
                expected_len + 4,
                self.buf.len()
            )));
        }
        if self.buf.len() > expected_len + 4 {
            return Err(Error::invalid(format!("{}: trailing bytes after payload", self.what)));
        }
        let stored = u32::from_le_bytes(self.buf[expected_len..].try_into().unwrap());
        let computed = crc32fast::hash(&self.buf[..expected_len]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(())
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!("{} at byte {}", self.what, self.pos)));
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

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}
