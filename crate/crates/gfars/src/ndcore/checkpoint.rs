//! Checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "GFRS" | u32 version | u32 entry count
//! per entry: u16 name len | UTF-8 name | u8 dtype (0=f32, 1=f64)
//!            | u8 rank | u64 dims[rank] | raw LE data
//! trailing CRC32 of all preceding bytes
//! ```
//!
//! Entries are written in parameter registration order, so saving the same
//! model twice produces byte-identical files.

use super::{ModelParams, NdError, NdResult, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GFRS";
const VERSION: u32 = 1;

/// Scalar width used for the raw data section.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointDtype {
    F32,
    F64,
}

impl CheckpointDtype {
    fn tag(self) -> u8 {
        match self {
            CheckpointDtype::F32 => 0,
            CheckpointDtype::F64 => 1,
        }
    }
}

#[cfg(feature = "ckpt-f32")]
const DEFAULT_DTYPE: CheckpointDtype = CheckpointDtype::F32;
#[cfg(not(feature = "ckpt-f32"))]
const DEFAULT_DTYPE: CheckpointDtype = CheckpointDtype::F64;

/// Write `params` to `path` in the default dtype (f64, or f32 with the
/// `ckpt-f32` feature).
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> NdResult<()> {
    save_checkpoint_as(params, path, DEFAULT_DTYPE)
}

/// Write `params` to `path` with an explicit scalar width. f32 halves the
/// file size at the cost of rounding each value to the nearest f32.
pub fn save_checkpoint_as(
    params: &ModelParams,
    path: impl AsRef<Path>,
    dtype: CheckpointDtype,
) -> NdResult<()> {
    let file = File::create(path)?;
    let mut w = HashingWriter {
        inner: BufWriter::new(file),
        hasher: crc32fast::Hasher::new(),
    };

    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(params.len()).map_err(|_| {
        NdError::CkptFormat(format!("too many entries for u32 count: {}", params.len()))
    })?;
    w.write_all(&count.to_le_bytes())?;

    for (name, tensor) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| NdError::CkptFormat(format!("name too long for u16 length: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dtype.tag()])?;
        let rank = u8::try_from(tensor.rank())
            .map_err(|_| NdError::CkptFormat(format!("rank too large for u8: {name}")))?;
        w.write_all(&[rank])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match dtype {
            CheckpointDtype::F64 => {
                for &v in tensor.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            CheckpointDtype::F32 => {
                for &v in tensor.data() {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
    }

    let crc = w.hasher.finalize();
    w.inner.write_all(&crc.to_le_bytes())?;
    w.inner.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint_as`]. f32 entries are
/// widened to f64 (lossless). Corruption, truncation, and version mismatch
/// are reported as distinct error variants.
pub fn load_checkpoint(path: impl AsRef<Path>) -> NdResult<ModelParams> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;

    if bytes.len() < MAGIC.len() + 8 + 4 {
        return Err(NdError::CkptTruncated(format!(
            "file has only {} bytes",
            bytes.len()
        )));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4-byte split"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(NdError::CkptChecksum { stored, computed });
    }

    let mut c = Cursor { buf: body, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(NdError::CkptFormat(format!(
            "bad magic bytes {magic:02x?}, expected {MAGIC:02x?}"
        )));
    }
    let version = c.read_u32("version")?;
    if version != VERSION {
        return Err(NdError::CkptVersion {
            found: version,
            expected: VERSION,
        });
    }
    let count = c.read_u32("entry count")? as usize;

    let mut params = ModelParams::new();
    for i in 0..count {
        let name_len = c.read_u16("name length")? as usize;
        let name_bytes = c.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| NdError::CkptFormat(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let dtype = c.read_u8("dtype")?;
        let rank = c.read_u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = c.read_u64("dim")?;
            shape.push(usize::try_from(d).map_err(|_| {
                NdError::CkptFormat(format!("entry {name}: dim {d} exceeds usize"))
            })?);
        }
        let numel: usize = shape.iter().product();
        let data = match dtype {
            0 => {
                let raw = c.take(numel * 4, "f32 data")?;
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64)
                    .collect()
            }
            1 => {
                let raw = c.take(numel * 8, "f64 data")?;
                raw.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect()
            }
            other => {
                return Err(NdError::CkptFormat(format!(
                    "entry {name}: unknown dtype tag {other}"
                )))
            }
        };
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if c.pos != c.buf.len() {
        return Err(NdError::CkptFormat(format!(
            "{} trailing bytes after last entry",
            c.buf.len() - c.pos
        )));
    }
    Ok(params)
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: crc32fast::Hasher,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> NdResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NdError::CkptTruncated(format!(
                "unexpected end of file while reading {what}"
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn read_u8(&mut self, what: &str) -> NdResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn read_u16(&mut self, what: &str) -> NdResult<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn read_u32(&mut self, what: &str) -> NdResult<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn read_u64(&mut self, what: &str) -> NdResult<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}
