//! Little-endian binary framing shared by the dataset, lookup-table and
//! checkpoint files. A file is a 4-byte magic, a `u32` version, then
//! sections of `tag[4] | u64 payload length | payload`.

use crate::error::{Error, Result};

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
    open: Option<usize>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer::default();
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn begin(&mut self, tag: &[u8; 4]) {
        self.end();
        self.buf.extend_from_slice(tag);
        self.open = Some(self.buf.len());
        self.buf.extend_from_slice(&0u64.to_le_bytes());
    }

    fn end(&mut self) {
        if let Some(at) = self.open.take() {
            let len = (self.buf.len() - at - 8) as u64;
            self.buf[at..at + 8].copy_from_slice(&len.to_le_bytes());
        }
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len_prefixed(&mut self, n: usize) {
        self.u32(n as u32);
    }

    pub fn str(&mut self, s: &str) {
        self.len_prefixed(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.len_prefixed(b.len());
        self.buf.extend_from_slice(b);
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.end();
        self.buf
    }
}

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
    section: String,
    section_end: usize,
}

impl<'a> Reader<'a> {
    /// Checks the magic and returns the reader plus the file version.
    pub fn open(bytes: &'a [u8], kind: &'static str, magic: &[u8; 4]) -> Result<(Self, u32)> {
        let mut r = Reader {
            bytes,
            pos: 0,
            kind,
            section: "header".into(),
            section_end: bytes.len(),
        };
        let m = r.take(4)?;
        if m != magic {
            return Err(r.err_at(0, format!("bad magic {m:?}, expected {magic:?}")));
        }
        let version = r.u32()?;
        Ok((r, version))
    }

    pub fn err_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            kind: self.kind,
            offset,
            msg: msg.into(),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        self.err_at(self.pos, msg)
    }

    /// Enters the next section, which must carry `tag`.
    pub fn section(&mut self, tag: &[u8; 4]) -> Result<()> {
        let name = String::from_utf8_lossy(tag).into_owned();
        if self.pos != self.section_end && self.section != "header" {
            return Err(self.err(format!("section `{}` has trailing bytes", self.section)));
        }
        self.section_end = self.bytes.len();
        if self.pos + 12 > self.bytes.len() {
            return Err(self.err(format!("missing section `{name}` (file truncated)")));
        }
        let got = &self.bytes[self.pos..self.pos + 4];
        if got != tag {
            return Err(self.err(format!(
                "expected section `{name}`, found `{}`",
                String::from_utf8_lossy(got)
            )));
        }
        self.pos += 4;
        let len = self.u64()? as usize;
        self.section = name;
        if self.pos + len > self.bytes.len() {
            return Err(self.err(format!(
                "section `{}` truncated: needs {len} bytes, {} remain",
                self.section,
                self.bytes.len() - self.pos
            )));
        }
        self.section_end = self.pos + len;
        Ok(())
    }

    /// Fails unless every byte was consumed.
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} unexpected trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.section_end {
            return Err(self.err(format!("unexpected end of section `{}`", self.section)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A `u32` count, checked against the bytes left in the section assuming
    /// each item occupies at least `min_item_bytes`.
    pub fn count(&mut self, min_item_bytes: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        let left = self.section_end - self.pos;
        if n.saturating_mul(min_item_bytes) > left {
            return Err(self.err(format!(
                "count {n} exceeds remaining {left} bytes of section `{}`",
                self.section
            )));
        }
        Ok(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.count(1)?;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err_at(at, "invalid utf-8 string"))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.count(1)?;
        self.take(n)
    }

    pub fn offset(&self) -> usize {
        self.pos
    }
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
