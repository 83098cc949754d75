//! Binary container shared by checkpoints and datasets, plus the plain-text
//! key-value manifest.
//!
//! All integers are little-endian `u32`/`u64`; strings are a `u32` byte
//! length followed by UTF-8; tensors are `ndim: u32`, `ndim` extents as
//! `u32`, then raw `f64` little-endian values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PTMDCKPT";
pub const DATASET_MAGIC: &[u8; 8] = b"PTMDDATA";

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8]) -> Self {
        let mut w = Writer { buf: magic.to_vec() };
        w.u32(FORMAT_VERSION);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.write_u32::<LittleEndian>(v).expect("vec write");
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.write_u64::<LittleEndian>(v).expect("vec write");
    }

    pub fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length fits in u32"));
    }

    pub fn str(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.len(t.ndim());
        for &d in t.shape() {
            self.len(d);
        }
        for &v in t.data() {
            self.buf.write_f64::<LittleEndian>(v).expect("vec write");
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated file: {e}"))
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        let mut r = Reader {
            cur: Cursor::new(bytes),
        };
        let mut found = [0u8; 8];
        r.cur.read_exact(&mut found).map_err(truncated)?;
        if &found != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&found),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        Ok(r)
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LittleEndian>().map_err(truncated)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LittleEndian>().map_err(truncated)
    }

    pub fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let mut bytes = vec![0u8; n];
        self.cur.read_exact(&mut bytes).map_err(truncated)?;
        String::from_utf8(bytes).map_err(|e| Error::Format(format!("invalid utf-8: {e}")))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.len()?;
        let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let remaining = self.cur.get_ref().len() - self.cur.position() as usize;
        if n.checked_mul(8).is_none_or(|b| b > remaining) {
            return Err(Error::Format(format!("tensor {shape:?} exceeds remaining {remaining} bytes")));
        }
        let mut data = vec![0.0; n];
        self.cur.read_f64_into::<LittleEndian>(&mut data).map_err(truncated)?;
        Tensor::new(&shape, data)
    }

    pub fn finish(self) -> Result<()> {
        let extra = self.cur.get_ref().len() - self.cur.position() as usize;
        if extra != 0 {
            return Err(Error::Format(format!("{extra} trailing bytes")));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Human-readable `key = value` record, one entry per line, sorted by key.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        let key = key.into();
        assert!(!key.contains('=') && !key.contains('\n'), "manifest key {key:?}");
        let value = value.to_string().replace('\n', " ");
        self.entries.insert(key, value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("manifest is missing `{key}`")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line {}: expected `key = value`", no + 1)))?;
            m.entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.render().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
