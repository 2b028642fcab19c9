use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Gender,
    Race,
    Age,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Gender, Attribute::Race, Attribute::Age];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Race => "race",
            Attribute::Age => "age",
        }
    }

    /// Stable code used by the binary formats.
    pub fn code(self) -> u8 {
        match self {
            Attribute::Gender => 0,
            Attribute::Race => 1,
            Attribute::Age => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.code() == code)
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attribute `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
}

impl Sentiment {
    pub const ALL: [Sentiment; 2] = [Sentiment::Positive, Sentiment::Negative];

    pub fn name(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Negative => "negative",
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered label names of one protected attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub attribute: Attribute,
    labels: Vec<String>,
}

impl LabelVocabulary {
    pub fn new<S: Into<String>>(attribute: Attribute, labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let v = Self { attribute, labels };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::BadVocabulary(format!("{} has no labels", self.attribute)));
        }
        if self.labels.len() >= usize::from(u16::MAX) {
            return Err(Error::BadVocabulary(format!("{} has too many labels", self.attribute)));
        }
        let mut seen = HashSet::new();
        for l in &self.labels {
            if l.is_empty() || !seen.insert(l.as_str()) {
                return Err(Error::BadVocabulary(format!("{}: empty or repeated label `{l}`", self.attribute)));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn cardinality(&self) -> usize {
        self.labels.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    /// FairFace-style label sets: gender 2, race 7, age 4 (bins split at
    /// 20, 40 and 60 years).
    pub fn fairface(attribute: Attribute) -> Self {
        let labels: &[&str] = match attribute {
            Attribute::Gender => &["male", "female"],
            Attribute::Race => &[
                "white",
                "black",
                "indian",
                "east_asian",
                "southeast_asian",
                "middle_eastern",
                "latino_hispanic",
            ],
            Attribute::Age => &["child", "young", "middle_aged", "senior"],
        };
        Self { attribute, labels: labels.iter().map(|s| s.to_string()).collect() }
    }

    /// PATA-style label sets: gender 2, race 5, age 2.
    pub fn pata(attribute: Attribute) -> Self {
        let labels: &[&str] = match attribute {
            Attribute::Gender => &["male", "female"],
            Attribute::Race => &["white", "black", "indian", "east_asian", "latino_hispanic"],
            Attribute::Age => &["young", "old"],
        };
        Self { attribute, labels: labels.iter().map(|s| s.to_string()).collect() }
    }

    /// The FairFace vocabularies in classifier-head order (race, gender, age).
    pub fn fairface_all() -> Vec<Self> {
        [Attribute::Race, Attribute::Gender, Attribute::Age].into_iter().map(Self::fairface).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f64>,
    /// Label index per attribute; absent attributes are unlabeled.
    pub labels: BTreeMap<Attribute, usize>,
    pub scene: Option<String>,
    pub split: Option<Split>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Self {
        Self { id: id.into(), vector, labels: BTreeMap::new(), scene: None, split: None }
    }

    pub fn with_label(mut self, attribute: Attribute, index: usize) -> Self {
        self.labels.insert(attribute, index);
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn with_scene(mut self, scene: impl Into<String>) -> Self {
        self.scene = Some(scene.into());
        self
    }

    pub fn label(&self, attribute: Attribute) -> Option<usize> {
        self.labels.get(&attribute).copied()
    }
}

/// A validated collection of image embeddings sharing one dimension and one
/// set of label vocabularies. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    d: usize,
    records: Vec<EmbeddingRecord>,
    vocabularies: Vec<LabelVocabulary>,
    pub source_tag: String,
}

impl EmbeddingSet {
    pub fn new(
        d: usize,
        vocabularies: Vec<LabelVocabulary>,
        source_tag: impl Into<String>,
        records: Vec<EmbeddingRecord>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut attrs = HashSet::new();
        for v in &vocabularies {
            v.validate()?;
            if !attrs.insert(v.attribute) {
                return Err(Error::BadVocabulary(format!("{} declared twice", v.attribute)));
            }
        }
        let set = Self { d, records: Vec::new(), vocabularies, source_tag: source_tag.into() };
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            set.check_record(r)?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self { records, ..set })
    }

    pub(crate) fn check_record(&self, r: &EmbeddingRecord) -> Result<()> {
        if r.vector.len() != self.d {
            return Err(Error::DimensionMismatch { id: r.id.clone(), expected: self.d, got: r.vector.len() });
        }
        if r.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(format!("vector of record `{}`", r.id)));
        }
        for (&attr, &idx) in &r.labels {
            let vocab = self.vocabulary(attr).ok_or(Error::UnknownAttribute(attr))?;
            if idx >= vocab.cardinality() {
                return Err(Error::LabelOutOfRange { attribute: attr, index: idx, cardinality: vocab.cardinality() });
            }
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }

    pub fn vocabularies(&self) -> &[LabelVocabulary] {
        &self.vocabularies
    }

    pub fn vocabulary(&self, attribute: Attribute) -> Option<&LabelVocabulary> {
        self.vocabularies.iter().find(|v| v.attribute == attribute)
    }

    pub fn attributes(&self) -> Vec<Attribute> {
        self.vocabularies.iter().map(|v| v.attribute).collect()
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &EmbeddingRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    /// A new set holding only the records of `split`.
    pub fn subset(&self, split: Split) -> EmbeddingSet {
        let records = self.records_in(split).cloned().collect();
        Self { records, ..self.empty_like() }
    }

    /// Same dimension, vocabularies and tag, no records.
    pub fn empty_like(&self) -> EmbeddingSet {
        Self {
            d: self.d,
            records: Vec::new(),
            vocabularies: self.vocabularies.clone(),
            source_tag: self.source_tag.clone(),
        }
    }

    /// Re-validates `records` against this set's dimension and vocabularies.
    pub fn with_records(&self, records: Vec<EmbeddingRecord>) -> Result<EmbeddingSet> {
        Self::new(self.d, self.vocabularies.clone(), self.source_tag.clone(), records)
    }

    /// Concatenates sets with identical dimension and vocabularies.
    pub fn concat(sets: &[EmbeddingSet]) -> Result<EmbeddingSet> {
        let first = sets.first().ok_or_else(|| Error::Config("no sets to concatenate".into()))?;
        for s in sets {
            if s.d != first.d || s.vocabularies != first.vocabularies {
                return Err(Error::RecordMismatch("sets differ in dimension or vocabularies".into()));
            }
        }
        let records = sets.iter().flat_map(|s| s.records.iter().cloned()).collect();
        first.with_records(records)
    }

    /// Number of labeled records per label of `attribute`.
    pub fn label_counts(&self, attribute: Attribute) -> Result<Vec<usize>> {
        let vocab = self.vocabulary(attribute).ok_or(Error::UnknownAttribute(attribute))?;
        let mut counts = vec![0; vocab.cardinality()];
        for r in &self.records {
            if let Some(i) = r.label(attribute) {
                counts[i] += 1;
            }
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    pub attribute: Attribute,
    pub sentiment: Sentiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
}
