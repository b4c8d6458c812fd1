//! Binary array container and checkpoint files.
//!
//! Array container, all integers little-endian:
//!
//! ```text
//! "PRDF" | version u8 (=1) | dtype u8 (0 = f32, 1 = f64) | ndim u8 | reserved u8 (=0)
//! extents: u64 x ndim
//! payload: row-major values, product(extents) * dtype size bytes
//! ```
//!
//! Checkpoint:
//!
//! ```text
//! "PRDFCKPT" | version u8 (=1) | reserved u8 x 3
//! header length u64 | header text (UTF-8): "step = N\n" followed by the run config
//! entry count u64
//! entries, sorted by name: name length u16 | name | dtype u8 | ndim u8 | extents u64 x ndim | offset u64
//! payload section: one array container per entry; offsets are relative to its start
//! ```

use std::fs;
use std::path::Path;

use crate::config;
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{Array, DType, Real};
use crate::train::TrainConfig;

pub const ARRAY_MAGIC: &[u8; 4] = b"PRDF";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PRDFCKPT";
pub const VERSION: u8 = 1;

/// A decoded container of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyArray {
    F32(Array<f32>),
    F64(Array<f64>),
}

impl AnyArray {
    pub fn dtype(&self) -> DType {
        match self {
            AnyArray::F32(_) => DType::F32,
            AnyArray::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyArray::F32(a) => a.shape(),
            AnyArray::F64(a) => a.shape(),
        }
    }

    /// The array at precision `T`; a different stored precision is an error.
    pub fn into_typed<T: Real>(self) -> Result<Array<T>> {
        let stored = self.dtype();
        let (shape, bytes) = match self {
            AnyArray::F32(a) => (a.shape().to_vec(), f32::to_le_bytes_vec(a.data())),
            AnyArray::F64(a) => (a.shape().to_vec(), f64::to_le_bytes_vec(a.data())),
        };
        if stored != T::DTYPE {
            return Err(Error::Format(format!("expected {:?} data, found {stored:?}", T::DTYPE)));
        }
        Array::from_vec(&shape, T::from_le_bytes_slice(&bytes))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated while reading {what}")));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} out of range")))
    }

    fn extents(&mut self, ndim: usize) -> Result<Vec<usize>> {
        (0..ndim).map(|_| self.usize("extent")).collect()
    }
}

fn dtype_of(code: u8) -> Result<DType> {
    DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))
}

pub fn encode_array<T: Real>(a: &Array<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * a.shape().len() + a.len() * T::DTYPE.size());
    out.extend_from_slice(ARRAY_MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE.code(), a.shape().len() as u8, 0]);
    for &e in a.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.extend_from_slice(&T::to_le_bytes_vec(a.data()));
    out
}

fn decode_from(r: &mut Reader) -> Result<AnyArray> {
    if r.take(4, "magic")? != ARRAY_MAGIC {
        return Err(Error::Format("bad array container magic".into()));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let dtype = dtype_of(r.u8("dtype")?)?;
    let ndim = r.u8("ndim")? as usize;
    r.u8("reserved")?;
    let shape = r.extents(ndim)?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let payload = r.take(count, "payload")?;
    Ok(match dtype {
        DType::F32 => AnyArray::F32(Array::from_vec(&shape, f32::from_le_bytes_slice(payload))?),
        DType::F64 => AnyArray::F64(Array::from_vec(&shape, f64::from_le_bytes_slice(payload))?),
    })
}

/// Decodes one container; trailing bytes are an error.
pub fn decode_array(bytes: &[u8]) -> Result<AnyArray> {
    let mut r = Reader { bytes, pos: 0 };
    let a = decode_from(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "payload length mismatch: {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(a)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_array<T: Real>(path: impl AsRef<Path>, a: &Array<T>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_array(a))
}

pub fn read_array(path: impl AsRef<Path>) -> Result<AnyArray> {
    let path = path.as_ref();
    decode_array(&read_bytes(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ModelParams<T>,
}

pub fn encode_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let header = format!("step = {}\n{}", ck.step, config::to_text(&ck.config));
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&[VERSION, 0, 0, 0]);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(ck.params.len() as u64).to_le_bytes());
    let mut payload = Vec::new();
    // ModelParams iterates in sorted name order.
    for (name, a) in ck.params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&[T::DTYPE.code(), a.shape().len() as u8]);
        for &e in a.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        payload.extend_from_slice(&encode_array(a));
    }
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    r.take(3, "reserved")?;
    let hlen = r.usize("header length")?;
    let header = std::str::from_utf8(r.take(hlen, "header")?)
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let (first, rest) = header.split_once('\n').unwrap_or((header, ""));
    let step = first
        .strip_prefix("step = ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad checkpoint header line {first:?}")))?;
    let config = config::parse(rest)?;
    let count = r.usize("entry count")?;
    let mut entries: Vec<(String, DType, Vec<usize>, usize)> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let dtype = dtype_of(r.u8("dtype")?)?;
        let ndim = r.u8("ndim")? as usize;
        let shape = r.extents(ndim)?;
        let offset = r.usize("offset")?;
        if let Some((prev, ..)) = entries.last() {
            if *prev >= name {
                return Err(Error::Format(format!("name table not sorted/unique at {name:?}")));
            }
        }
        entries.push((name, dtype, shape, offset));
    }
    let base = r.pos;
    let mut params = ModelParams::new();
    for (name, dtype, shape, offset) in entries {
        let mut pr = Reader {
            bytes,
            pos: base
                .checked_add(offset)
                .filter(|&p| p <= bytes.len())
                .ok_or_else(|| Error::Format(format!("offset of {name} out of range")))?,
        };
        let a = decode_from(&mut pr)?;
        if a.dtype() != dtype || a.shape() != shape.as_slice() {
            return Err(Error::Format(format!("payload of {name} disagrees with its table entry")));
        }
        params.insert(name, a.into_typed()?)?;
    }
    Ok(Checkpoint { config, step, params })
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, ck: &Checkpoint<T>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_checkpoint(ck)?)
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    decode_checkpoint(&read_bytes(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_layout() {
        let a = Array::from_vec(&[1, 2], vec![1.0f32, -2.5]).unwrap();
        let b = encode_array(&a);
        assert_eq!(&b[..8], b"PRDF\x01\x00\x02\x00");
        assert_eq!(&b[8..16], &1u64.to_le_bytes());
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 8 + 16 + 8);
        assert_eq!(decode_array(&b).unwrap(), AnyArray::F32(a));
    }

    #[test]
    fn documented_example_bytes() {
        let a = Array::from_vec(&[2, 3], vec![0.0f32, 0.5, 1.0, 1.5, 2.0, -1.0]).unwrap();
        let hex: Vec<String> = encode_array(&a).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(
            hex.join(" "),
            "50 52 44 46 01 00 02 00 02 00 00 00 00 00 00 00 03 00 00 00 00 00 00 00 \
             00 00 00 00 00 00 00 3f 00 00 80 3f 00 00 c0 3f 00 00 00 40 00 00 80 bf"
        );
    }

    #[test]
    fn container_rejects_corruption() {
        let mut b = encode_array(&Array::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap());
        assert!(decode_array(&b[..b.len() - 1]).is_err());
        b[4] = 9;
        assert!(decode_array(&b).unwrap_err().to_string().contains("version"));
        b[0] = b'X';
        assert!(decode_array(&b).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.model.encoder.channels = vec![2, 3];
        cfg.model.decoder = vec![2, 2];
        let params = cfg.model.init_params::<f32>(4).unwrap();
        let ck = Checkpoint { config: cfg, step: 17, params };
        let bytes = encode_checkpoint(&ck).unwrap();
        let back: Checkpoint<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert!(decode_checkpoint::<f64>(&bytes).is_err());
    }
}
