//! JSONL embedding format.
//!
//! One record per line:
//! `{"id": str, "vector": [f..], "labels": {"gender": str?, "race": str?, "age": str?}, "scene": str?, "split": str?}`.
//!
//! An optional first line `{"header": {"d": n, "source_tag": str, "vocabularies": [...]}}`
//! declares the dimension and label vocabularies. Without it the dimension is
//! taken from the first record and the FairFace vocabularies are assumed.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::types::{Attribute, EmbeddingRecord, EmbeddingSet, LabelVocabulary, Split};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    header: Header,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    d: usize,
    #[serde(default)]
    source_tag: String,
    vocabularies: Vec<LabelVocabulary>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    vector: Vec<f64>,
    #[serde(default)]
    labels: BTreeMap<Attribute, Option<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<EmbeddingSet> {
    let mut header: Option<Header> = None;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    let mut shell: Option<EmbeddingSet> = None;

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let at = |e: Error| Error::at_line(lineno, e);
        let line = line.map_err(|e| at(e.into()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| at(e.into()))?;
        if value.get("header").is_some() {
            if shell.is_some() || header.is_some() {
                return Err(at(Error::BadHeader("header must be the first line".into())));
            }
            let h: HeaderLine = serde_json::from_value(value).map_err(|e| at(e.into()))?;
            header = Some(h.header);
            continue;
        }
        let line: RecordLine = serde_json::from_value(value).map_err(|e| at(e.into()))?;
        if shell.is_none() {
            let (d, vocabs, tag) = match header.take() {
                Some(h) => (h.d, h.vocabularies, h.source_tag),
                None => (line.vector.len(), LabelVocabulary::fairface_all(), String::new()),
            };
            shell = Some(EmbeddingSet::new(d, vocabs, tag, Vec::new()).map_err(at)?);
        }
        let set = shell.as_ref().expect("initialized above");
        let record = to_record(set, line).map_err(at)?;
        set.check_record(&record).map_err(at)?;
        if !ids.insert(record.id.clone()) {
            return Err(at(Error::DuplicateId(record.id)));
        }
        records.push(record);
    }

    let set = match (shell, header) {
        (Some(s), _) => s,
        (None, Some(h)) => EmbeddingSet::new(h.d, h.vocabularies, h.source_tag, Vec::new())?,
        (None, None) => return Err(Error::BadHeader("empty JSONL file without a header".into())),
    };
    set.with_records(records)
}

fn to_record(set: &EmbeddingSet, line: RecordLine) -> Result<EmbeddingRecord> {
    let mut labels = BTreeMap::new();
    for (attr, name) in line.labels {
        let Some(name) = name else { continue };
        let vocab = set.vocabulary(attr).ok_or(Error::UnknownAttribute(attr))?;
        let idx = vocab.index_of(&name).ok_or(Error::UnknownLabel { attribute: attr, label: name })?;
        labels.insert(attr, idx);
    }
    Ok(EmbeddingRecord { id: line.id, vector: line.vector, labels, scene: line.scene, split: line.split })
}

pub fn write_jsonl<W: Write>(set: &EmbeddingSet, mut w: W) -> Result<()> {
    let header = HeaderLine {
        header: Header { d: set.d(), source_tag: set.source_tag.clone(), vocabularies: set.vocabularies().to_vec() },
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in set.records() {
        let mut labels = BTreeMap::new();
        for (&attr, &idx) in &r.labels {
            let vocab = set.vocabulary(attr).ok_or(Error::UnknownAttribute(attr))?;
            labels.insert(attr, Some(vocab.label(idx).to_string()));
        }
        let line = RecordLine {
            id: r.id.clone(),
            vector: r.vector.clone(),
            labels,
            scene: r.scene.clone(),
            split: r.split,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
