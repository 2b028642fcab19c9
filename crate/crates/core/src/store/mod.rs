//! Embedding sets, caption manifests, label vocabularies and their on-disk
//! formats (JSONL and a packed little-endian binary format).

mod captions;
mod jsonl;
mod packed;
mod split;
mod types;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use captions::{caption_counts, read_captions, validate_captions, write_captions, CaptionCounts};
pub use jsonl::{read_jsonl, write_jsonl};
pub use packed::{read_packed, read_vectors, write_packed, write_vectors, PACKED_MAGIC, PACKED_VERSION};
pub use split::{split_set, SplitFractions};
pub use types::{
    Attribute, CaptionRecord, EmbeddingRecord, EmbeddingSet, LabelVocabulary, Sentiment, Split,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Packed,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Jsonl => "jsonl",
            Format::Packed => "packed",
        }
    }
}

pub fn load_embeddings(path: impl AsRef<Path>, format: Format) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let wrap = |e| Error::in_file(path, e);
    let file = File::open(path).map_err(|e| wrap(e.into()))?;
    let reader = BufReader::new(file);
    match format {
        Format::Jsonl => read_jsonl(reader),
        Format::Packed => read_packed(reader),
    }
    .map_err(wrap)
}

pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    let wrap = |e| Error::in_file(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(|e| wrap(e.into()))?);
    match format {
        Format::Jsonl => write_jsonl(set, &mut w),
        Format::Packed => write_packed(set, &mut w),
    }
    .map_err(wrap)?;
    w.flush().map_err(|e| wrap(e.into()))
}

pub fn load_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::in_file(path, e.into()))?;
    read_captions(BufReader::new(file)).map_err(|e| Error::in_file(path, e))
}

pub fn save_captions(captions: &[CaptionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let wrap = |e| Error::in_file(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(|e| wrap(e.into()))?);
    write_captions(captions, &mut w).map_err(wrap)?;
    w.flush().map_err(|e| wrap(e.into()))
}
