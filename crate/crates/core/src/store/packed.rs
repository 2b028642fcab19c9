//! Packed little-endian embedding format, version 1.
//!
//! ```text
//! header:
//!   magic        4 bytes  "FEMB"
//!   version      u32      1
//!   d            u32
//!   count        u64
//!   n_vocab      u8
//!   n_vocab times:
//!     attribute  u8       0 gender, 1 race, 2 age
//!     n_labels   u16
//!     n_labels times: len u16, UTF-8 bytes
//! count records:
//!   id_len       u32
//!   id           id_len UTF-8 bytes
//!   labels       n_vocab × u16, in vocabulary order; 0xFFFF = unlabeled
//!   vector       d × f32
//! ```
//!
//! Vectors are stored at 32-bit precision; values are widened to `f64` on
//! read, so a file read and rewritten is byte-identical.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use super::types::{Attribute, EmbeddingRecord, EmbeddingSet, LabelVocabulary};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const PACKED_MAGIC: &[u8; 4] = b"FEMB";
pub const PACKED_VERSION: u32 = 1;
const UNLABELED: u16 = 0xFFFF;

pub fn write_packed<W: Write>(set: &EmbeddingSet, w: W) -> Result<()> {
    let mut w = Writer::new(w);
    w.bytes(PACKED_MAGIC)?;
    w.u32(PACKED_VERSION)?;
    w.u32(u32::try_from(set.d()).map_err(|_| Error::BadHeader("dimension exceeds u32".into()))?)?;
    w.u64(set.len() as u64)?;
    let vocabs = set.vocabularies();
    w.u8(u8::try_from(vocabs.len()).map_err(|_| Error::BadHeader("too many vocabularies".into()))?)?;
    for v in vocabs {
        w.u8(v.attribute.code())?;
        w.u16(v.cardinality() as u16)?;
        for l in v.labels() {
            w.short_str(l)?;
        }
    }
    for r in set.records() {
        w.long_str(&r.id)?;
        for v in vocabs {
            w.u16(r.label(v.attribute).map_or(UNLABELED, |i| i as u16))?;
        }
        for &x in &r.vector {
            w.f32(x as f32)?;
        }
    }
    Ok(())
}

pub fn read_packed<R: Read>(r: R) -> Result<EmbeddingSet> {
    let mut r = Reader::new(r);
    r.magic(PACKED_MAGIC)?;
    let version = r.u32()?;
    if version != PACKED_VERSION {
        return Err(Error::BadHeader(format!("unsupported version {version}")));
    }
    let d = r.u32()? as usize;
    let count = r.u64()?;
    let n_vocab = r.u8()? as usize;
    let mut vocabs = Vec::with_capacity(n_vocab);
    for _ in 0..n_vocab {
        let code = r.u8()?;
        let attribute =
            Attribute::from_code(code).ok_or_else(|| Error::BadHeader(format!("unknown attribute code {code}")))?;
        let n = r.u16()? as usize;
        let labels = (0..n).map(|_| r.short_str()).collect::<Result<Vec<_>>>()?;
        vocabs.push(LabelVocabulary::new(attribute, labels)?);
    }
    let shell = EmbeddingSet::new(d, vocabs, "", Vec::new())?;

    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut ids = HashSet::new();
    for index in 0..count {
        let offset = r.offset();
        let at = |e| Error::AtRecord { index, offset, source: Box::new(e) };
        let record = read_record(&mut r, &shell).map_err(at)?;
        shell.check_record(&record).map_err(at)?;
        if !ids.insert(record.id.clone()) {
            return Err(at(Error::DuplicateId(record.id)));
        }
        records.push(record);
    }
    if !r.at_eof()? {
        return Err(Error::BadHeader(format!("trailing bytes after {count} records")));
    }
    shell.with_records(records)
}

fn read_record<R: Read>(r: &mut Reader<R>, shell: &EmbeddingSet) -> Result<EmbeddingRecord> {
    let id = r.long_str()?;
    let mut labels = BTreeMap::new();
    for v in shell.vocabularies() {
        let idx = r.u16()?;
        if idx != UNLABELED {
            labels.insert(v.attribute, usize::from(idx));
        }
    }
    let vector = (0..shell.d()).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingRecord { id, vector, labels, scene: None, split: None })
}

/// Writes bare `(id, vector)` pairs in the packed format with an empty
/// vocabulary table (used for residual sidecars).
pub fn write_vectors<W: Write>(d: usize, vectors: &[(String, Vec<f64>)], w: W) -> Result<()> {
    let records = vectors.iter().map(|(id, v)| EmbeddingRecord::new(id.clone(), v.clone())).collect();
    let set = EmbeddingSet::new(d, Vec::new(), "", records)?;
    write_packed(&set, w)
}

pub fn read_vectors<R: Read>(r: R) -> Result<Vec<(String, Vec<f64>)>> {
    Ok(read_packed(r)?.into_records().into_iter().map(|r| (r.id, r.vector)).collect())
}
