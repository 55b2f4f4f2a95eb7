//! `PLCK` network checkpoints and `PLMO` optimizer-state files.
//!
//! Both share one tensor section: a `u32` count, then per tensor a `u32`
//! name length, the UTF-8 name, a `u32` rank, `u64` dimensions and raw
//! little-endian `f64` values. A checkpoint starts with `PLCK`, a `u32`
//! format version and a frozen flag byte, then the parameter section, then a
//! `u32`-prefixed JSON encoding of the network spec. All integers are
//! little-endian.

use std::path::Path;

use lupi_core::{Network, NetworkSpec, Sgd, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PLCK";
pub const MOMENTUM_MAGIC: &[u8; 4] = b"PLMO";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_tensors<'a>(
    buf: &mut Vec<u8>,
    items: impl ExactSizeIterator<Item = (&'a str, &'a [usize], &'a [f64])>,
) {
    put_u32(buf, items.len());
    for (name, shape, data) in items {
        put_u32(buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(buf, shape.len());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("truncated")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> std::result::Result<usize, String> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| "dimension overflow".to_string())
    }

    fn tensors(&mut self) -> std::result::Result<Vec<(String, Tensor)>, String> {
        let count = self.u32()?;
        let mut out = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = self.u32()?;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|e| e.to_string())?
                .to_string();
            let rank = self.u32()?;
            let shape = (0..rank)
                .map(|_| self.u64())
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or("size overflow")?;
            let raw = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push((name, Tensor::new(&shape, data).map_err(|e| e.to_string())?));
        }
        Ok(out)
    }

    fn magic(&mut self, want: &[u8; 4]) -> std::result::Result<(), String> {
        if self.take(4)? != want {
            return Err(format!("expected magic {}", String::from_utf8_lossy(want)));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(format!("unsupported format version {version}"));
        }
        Ok(())
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.bytes.len() {
            return Err(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(u8::from(net.is_frozen()));
    put_tensors(
        &mut buf,
        net.params()
            .iter()
            .map(|(n, t)| (n.as_str(), t.shape(), t.data())),
    );
    let spec = serde_json::to_vec(net.spec()).expect("spec serializes");
    put_u32(&mut buf, spec.len());
    buf.extend_from_slice(&spec);
    buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Network> {
    let malformed = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader { bytes, pos: 0 };
    r.magic(MAGIC).map_err(malformed)?;
    let frozen = match r.take(1).map_err(malformed)?[0] {
        0 => false,
        1 => true,
        b => return Err(malformed(format!("bad frozen flag {b}"))),
    };
    let params = r.tensors().map_err(malformed)?;
    let len = r.u32().map_err(malformed)?;
    let spec: NetworkSpec =
        serde_json::from_slice(r.take(len).map_err(malformed)?).map_err(Error::json(path))?;
    r.finish().map_err(malformed)?;
    let mut net = Network::from_parts(spec, params)?;
    if frozen {
        net.freeze();
    }
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    write_atomic(path, &encode(net))
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path)
}

pub fn encode_momentum(opt: &Sgd) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MOMENTUM_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let items: Vec<_> = opt.velocities().collect();
    let shapes: Vec<[usize; 1]> = items.iter().map(|(_, v)| [v.len()]).collect();
    put_tensors(
        &mut buf,
        items
            .iter()
            .zip(&shapes)
            .map(|((n, v), s)| (*n, &s[..], *v)),
    );
    buf
}

/// Restores velocity buffers saved by [`encode_momentum`] into `opt`.
pub fn decode_momentum(bytes: &[u8], path: &Path, opt: &mut Sgd) -> Result<()> {
    let malformed = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader { bytes, pos: 0 };
    r.magic(MOMENTUM_MAGIC).map_err(malformed)?;
    let items = r.tensors().map_err(malformed)?;
    r.finish().map_err(malformed)?;
    if items.len() != opt.velocities().count() {
        return Err(malformed(format!(
            "{} buffers for {} parameters",
            items.len(),
            opt.velocities().count()
        )));
    }
    for (name, t) in items {
        opt.set_velocity(&name, t.into_data())?;
    }
    Ok(())
}

/// Writes through a temporary sibling and renames, so a crash never leaves
/// a half-written file behind.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(Error::io(path))
}
