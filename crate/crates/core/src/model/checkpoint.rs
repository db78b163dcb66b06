//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "PJEM" | version u32 | K u32 | M u32
//!        | n u32 | encoder chain widths u32 x n
//!        | n u32 | projector chain widths u32 x n
//!        | records: name_len u32, name, rank u32, extents u32 x rank, f64 x prod(extents)
//!        | FNV-1a 64 checksum of everything before it
//! ```

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use super::{encoder_chain, projector_chain, EncoderConfig, ModelError, ParameterStore, SegmentLayout, POINT_DIM};
use crate::diffcore::NumericArray;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PJEM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) fn encode_store(store: &ParameterStore) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, store.layout.segments());
    put_u32(&mut buf, store.layout.segment_size());
    let enc = encoder_chain(&store.encoder);
    let proj = projector_chain(store.encoder.repr_dim(), &store.proj_hidden, store.layout);
    for chain in [&enc, &proj] {
        put_u32(&mut buf, chain.len());
        for &w in chain.iter() {
            put_u32(&mut buf, w);
        }
    }
    for (name, arr) in &store.params {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, arr.rank());
        for &e in arr.shape() {
            put_u32(&mut buf, e);
        }
        for v in arr.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).ok_or(ModelError::Truncated(self.pos))?;
        if end > self.bytes.len() {
            return Err(ModelError::Truncated(self.bytes.len()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn chain(&mut self) -> Result<Vec<usize>, ModelError> {
        let n = self.u32()?;
        if n > 1024 {
            return Err(ModelError::Corrupt(format!("implausible layer count {n}")));
        }
        (0..n).map(|_| self.u32()).collect()
    }
}

pub(crate) fn decode_store(bytes: &[u8]) -> Result<ParameterStore, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let layout = SegmentLayout::new(r.u32()?, r.u32()?).map_err(|e| ModelError::Corrupt(e.to_string()))?;
    let enc = r.chain()?;
    let proj = r.chain()?;
    if enc.len() < 2 || enc[0] != POINT_DIM {
        return Err(ModelError::Corrupt(format!("bad encoder chain {enc:?}")));
    }
    let encoder = EncoderConfig {
        widths: enc[1..].to_vec(),
    };
    if proj.len() < 2 || proj[0] != encoder.repr_dim() || *proj.last().unwrap() != layout.dim() {
        return Err(ModelError::Corrupt(format!("bad projector chain {proj:?}")));
    }
    let mut store = ParameterStore {
        encoder,
        proj_hidden: proj[1..proj.len() - 1].to_vec(),
        layout,
        params: Vec::new(),
    };
    for (expected_name, expected_shape) in store.expected_shapes() {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Corrupt("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        if name != expected_name || shape != expected_shape {
            return Err(ModelError::Corrupt(format!(
                "expected {expected_name} {expected_shape:?}, found {name} {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.params.push((name, NumericArray::from_parts(shape, data)));
    }
    let body_end = r.pos;
    let stored = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    if r.pos != bytes.len() {
        return Err(ModelError::Corrupt(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let computed = checksum(&bytes[..body_end]);
    if stored != computed {
        return Err(ModelError::ChecksumMismatch { stored, computed });
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<(), ModelError> {
    fs::write(path, encode_store(store)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_store(&bytes)
}
