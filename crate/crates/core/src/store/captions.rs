//! Caption manifests: one JSON object per line,
//! `{"id": str, "text": str, "vector": [f..]?, "attribute": str, "sentiment": "positive"|"negative", "scene": str?}`.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use super::types::{Attribute, CaptionRecord, Sentiment};
use crate::error::{Error, Result};

pub fn read_captions<R: BufRead>(reader: R) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let at = |e: Error| Error::at_line(i + 1, e);
        let line = line.map_err(|e| at(e.into()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(&line).map_err(|e| at(e.into()))?;
        if let Some(v) = &rec.vector {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(at(Error::NonFiniteInput(format!("caption `{}`", rec.id))));
            }
        }
        if !ids.insert(rec.id.clone()) {
            return Err(at(Error::DuplicateId(rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_captions<W: Write>(captions: &[CaptionRecord], mut w: W) -> Result<()> {
    for c in captions {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Checks that every vectored caption has dimension `d`.
pub fn validate_captions(captions: &[CaptionRecord], d: usize) -> Result<()> {
    for c in captions {
        if let Some(v) = &c.vector {
            if v.len() != d {
                return Err(Error::DimensionMismatch { id: c.id.clone(), expected: d, got: v.len() });
            }
        }
    }
    Ok(())
}

pub type CaptionCounts = BTreeMap<(Option<String>, Attribute, Sentiment), usize>;

/// Number of captions per (scene, attribute, sentiment).
pub fn caption_counts(captions: &[CaptionRecord]) -> CaptionCounts {
    let mut counts = CaptionCounts::new();
    for c in captions {
        *counts.entry((c.scene.clone(), c.attribute, c.sentiment)).or_default() += 1;
    }
    counts
}
