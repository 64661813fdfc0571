//! Binary checkpoint format.
//!
//! ```text
//! magic    "PFLF"
//! version  u16
//! tag      u16 length + UTF-8 bytes   ("classifier", "generator", ...)
//! count    u32 number of layer records
//! record   u32 byte length, then:
//!            name   u16 length + UTF-8 bytes
//!            kind   u8 (0 weight, 1 bias, 2 bn-gamma, 3 bn-beta,
//!                       4 bn-running-mean, 5 bn-running-var)
//!            layer  u32
//!            offset u64
//!            ndim   u8, then ndim x u32 dims
//! payload  u64 value count, then little-endian f32 values
//! ```
//! All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::params::{LayoutEntry, ParamKind, ParamLayout, ParamVector};

pub const MAGIC: &[u8; 4] = b"PFLF";
pub const VERSION: u16 = 1;
pub const TAG_CLASSIFIER: &str = "classifier";
pub const TAG_GENERATOR: &str = "generator";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub params: ParamVector,
}

pub fn encode(tag: &str, params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, tag);
    let entries = params.layout().entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let mut rec = Vec::new();
        put_str(&mut rec, &e.name);
        rec.push(e.kind.code());
        rec.extend_from_slice(&(e.layer as u32).to_le_bytes());
        rec.extend_from_slice(&(e.offset as u64).to_le_bytes());
        rec.push(e.shape.len() as u8);
        for &d in &e.shape {
            rec.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 string".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let tag = r.string()?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let start = r.pos;
        let name = r.string()?;
        let code = r.u8()?;
        let kind = ParamKind::from_code(code).ok_or_else(|| Error::Format(format!("unknown kind code {code}")))?;
        let layer = r.u32()? as usize;
        let offset = r.u64()? as usize;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if r.pos - start != len {
            return Err(Error::Format(format!("record `{name}` length mismatch")));
        }
        entries.push(LayoutEntry { name, kind, offset, shape, layer });
    }
    let layout = ParamLayout::from_entries(entries)?;
    let n = r.u64()? as usize;
    if n != layout.len() {
        return Err(Error::Format(format!("payload has {n} values but the layer table covers {}", layout.len())));
    }
    let raw = r.take(n * 4)?;
    let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(Checkpoint { tag, params: ParamVector::new(Arc::new(layout), values)? })
}

pub fn save(path: impl AsRef<Path>, tag: &str, params: &ParamVector) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(tag, params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Human-readable layer table.
pub fn describe(ckpt: &Checkpoint) -> String {
    let mut s = format!("tag: {}\nparameters: {}\n", ckpt.tag, ckpt.params.len());
    s.push_str(&format!("{:<28} {:<16} {:>8} {:>16} {:>12}\n", "name", "kind", "offset", "shape", "max|v|"));
    for e in ckpt.params.layout().entries() {
        let max = ckpt.params.slice(e).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        s.push_str(&format!(
            "{:<28} {:<16} {:>8} {:>16} {:>12.5}\n",
            e.name,
            e.kind.name(),
            e.offset,
            format!("{:?}", e.shape),
            max
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Network, NetworkSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn header_bytes_are_fixed() {
        let net = Network::new(NetworkSpec::desk_classifier(1, 8, 3)).unwrap();
        let p = ParamVector::zeros(net.layout().clone());
        let bytes = encode(TAG_CLASSIFIER, &p);
        assert_eq!(&bytes[..4], b"PFLF");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[10, 0]);
        assert_eq!(&bytes[8..18], b"classifier");
        assert_eq!(bytes.len() - p.len() * 4, bytes.len() - p.len() * 4);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_identity(seed in any::<u64>(), generator in any::<bool>()) {
            let spec = if generator { NetworkSpec::generator(1, 8, 4, 2) } else { NetworkSpec::desk_classifier(1, 8, 3) };
            let net = Network::new(spec).unwrap();
            let p = net.init_params(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let tag = if generator { TAG_GENERATOR } else { TAG_CLASSIFIER };
            let back = decode(&encode(tag, &p)).unwrap();
            prop_assert_eq!(back.tag, tag);
            prop_assert_eq!(back.params.values(), p.values());
            prop_assert_eq!(&**back.params.layout(), &**p.layout());
        }
    }
}
