//! Synthetic embeddings with planted protected-attribute directions.
//!
//! Every image vector is
//!
//! ```text
//! e = m0 * mu + sum_j c_j v_j + sum_attr beta_attr * u[attr][label] + N(0, sigma^2 I)
//! ```
//!
//! where `mu, v_1..` span the context subspace, the `u` rows are orthonormal
//! and orthogonal to it, and `c_j ~ N(0, s^2)`. The caption for
//! `(attr, label, sentiment)` is `a * u[attr][label] + b * mu + c * w` with `w`
//! a random unit context direction orthogonal to `mu`, so with `beta > 0` it
//! matches images carrying that label more often.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ZeroShotRecord, ZeroShotTask};
use crate::numerics::{argmax, orthonormalize_rows, Matrix, Rng};
use crate::store::{Attribute, CaptionRecord, EmbeddingRecord, EmbeddingSet, LabelVocabulary, Sentiment, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { train: 4000, val: 500, test: 500 }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// A single strength for every attribute, or one per attribute (missing
/// attributes get 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BiasStrength {
    Uniform(f64),
    PerAttribute(BTreeMap<Attribute, f64>),
}

impl BiasStrength {
    pub fn of(&self, attribute: Attribute) -> f64 {
        match self {
            BiasStrength::Uniform(v) => *v,
            BiasStrength::PerAttribute(m) => m.get(&attribute).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionGeometry {
    /// Weight on the target label's planted direction.
    pub label_weight: f64,
    /// Weight on the mean direction `mu`.
    pub mean_weight: f64,
    /// Weight on a random context direction orthogonal to `mu`.
    pub context_weight: f64,
    pub per_label: usize,
}

impl Default for CaptionGeometry {
    fn default() -> Self {
        Self { label_weight: 0.917, mean_weight: 0.16, context_weight: 0.367, per_label: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub d: usize,
    pub counts: SplitCounts,
    pub vocabularies: Vec<LabelVocabulary>,
    /// Label proportions per attribute; uniform when absent.
    pub proportions: BTreeMap<Attribute, Vec<f64>>,
    pub bias_strength: BiasStrength,
    /// Dimension of the context subspace, including `mu`.
    pub context_dim: usize,
    /// Standard deviation of each context coefficient.
    pub context_scale: f64,
    /// Coefficient `m0` on `mu`.
    pub mean_offset: f64,
    pub noise_sigma: f64,
    pub captions: CaptionGeometry,
    pub source_tag: String,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            d: 64,
            counts: SplitCounts::default(),
            vocabularies: LabelVocabulary::fairface_all(),
            proportions: BTreeMap::new(),
            bias_strength: BiasStrength::Uniform(1.0),
            context_dim: 32,
            context_scale: 1.0,
            mean_offset: 8.0,
            noise_sigma: 0.05,
            captions: CaptionGeometry::default(),
            source_tag: "synthetic".into(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn planted_rank(&self) -> usize {
        self.vocabularies.iter().map(LabelVocabulary::cardinality).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.context_dim == 0 {
            return Err(Error::Infeasible("d and context_dim must be positive".into()));
        }
        if self.context_dim + self.planted_rank() > self.d {
            return Err(Error::Infeasible(format!(
                "context_dim {} + planted rank {} exceeds d = {}",
                self.context_dim,
                self.planted_rank(),
                self.d
            )));
        }
        if self.counts.total() == 0 {
            return Err(Error::Infeasible("no records requested".into()));
        }
        for v in &self.vocabularies {
            v.validate()?;
        }
        for (i, v) in self.vocabularies.iter().enumerate() {
            if self.vocabularies[..i].iter().any(|w| w.attribute == v.attribute) {
                return Err(Error::Infeasible(format!("attribute {} listed twice", v.attribute)));
            }
        }
        for (attr, p) in &self.proportions {
            let card = self
                .vocabularies
                .iter()
                .find(|v| v.attribute == *attr)
                .ok_or(Error::UnknownAttribute(*attr))?
                .cardinality();
            let sum: f64 = p.iter().sum();
            if p.len() != card || p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Infeasible(format!("proportions for {attr} must be {card} values summing to 1")));
            }
        }
        let scalars = [self.context_scale, self.mean_offset, self.noise_sigma];
        let strengths = self.vocabularies.iter().map(|v| self.bias_strength.of(v.attribute));
        if scalars.iter().copied().chain(strengths).any(|x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Infeasible("scales, noise and bias strengths must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn proportions_of(&self, v: &LabelVocabulary) -> Vec<f64> {
        self.proportions
            .get(&v.attribute)
            .cloned()
            .unwrap_or_else(|| vec![1.0 / v.cardinality() as f64; v.cardinality()])
    }
}

/// Label offsets for one attribute: row `l` is the unit direction of label `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedMap {
    pub vocabulary: LabelVocabulary,
    pub directions: Matrix,
    pub bias_strength: f64,
}

/// Ground truth behind a generated set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOracle {
    pub d: usize,
    /// Row 0 is `mu`.
    pub context_basis: Matrix,
    pub planted: Vec<PlantedMap>,
    pub seed: u64,
}

impl SynthOracle {
    pub fn planted_map(&self, attribute: Attribute) -> Option<&PlantedMap> {
        self.planted.iter().find(|p| p.vocabulary.attribute == attribute)
    }

    /// Random unit vector in the span of the context basis rows `from..`.
    fn context_direction(&self, from: usize, rng: &mut Rng) -> Vec<f64> {
        let mut v = vec![0.0; self.d];
        for r in from..self.context_basis.rows() {
            let c = rng.normal();
            for (o, b) in v.iter_mut().zip(self.context_basis.row(r)) {
                *o += c * b;
            }
        }
        let n = crate::numerics::l2_norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        v
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub images: EmbeddingSet,
    pub captions: Vec<CaptionRecord>,
    pub oracle: SynthOracle,
}

/// Per-label counts summing to `n`, from cumulative rounding of `p`.
pub fn exact_counts(n: usize, p: &[f64]) -> Vec<usize> {
    let mut out = Vec::with_capacity(p.len());
    let (mut cum, mut prev) = (0.0, 0usize);
    for (i, &x) in p.iter().enumerate() {
        cum += x;
        let upto = if i + 1 == p.len() { n } else { ((n as f64) * cum).round() as usize };
        let upto = upto.clamp(prev, n);
        out.push(upto - prev);
        prev = upto;
    }
    out
}

fn build_oracle(spec: &SynthSpec) -> Result<SynthOracle> {
    let rank = spec.planted_rank();
    let rows = rank + spec.context_dim;
    let mut rng = Rng::stream(spec.seed, 0);
    let raw = Matrix::from_vec(rows, spec.d, (0..rows * spec.d).map(|_| rng.normal()).collect())?;
    let basis = orthonormalize_rows(&raw)?;
    let mut planted = Vec::with_capacity(spec.vocabularies.len());
    let mut next = 0;
    for v in &spec.vocabularies {
        let rows: Vec<&[f64]> = (next..next + v.cardinality()).map(|r| basis.row(r)).collect();
        planted.push(PlantedMap {
            vocabulary: v.clone(),
            directions: Matrix::from_rows(&rows)?,
            bias_strength: spec.bias_strength.of(v.attribute),
        });
        next += v.cardinality();
    }
    let context: Vec<&[f64]> = (rank..rows).map(|r| basis.row(r)).collect();
    Ok(SynthOracle { d: spec.d, context_basis: Matrix::from_rows(&context)?, planted, seed: spec.seed })
}

/// Context plus noise for one record; planted offsets are added by the caller.
fn base_vector(spec: &SynthSpec, oracle: &SynthOracle, rng: &mut Rng) -> Vec<f64> {
    let mut v = vec![0.0; spec.d];
    for r in 0..oracle.context_basis.rows() {
        let c = if r == 0 { spec.mean_offset } else { spec.context_scale * rng.normal() };
        for (o, b) in v.iter_mut().zip(oracle.context_basis.row(r)) {
            *o += c * b;
        }
    }
    for o in &mut v {
        *o += spec.noise_sigma * rng.normal();
    }
    v
}

fn add_offsets(v: &mut [f64], oracle: &SynthOracle, labels: &BTreeMap<Attribute, usize>) {
    for p in &oracle.planted {
        if let Some(&l) = labels.get(&p.vocabulary.attribute) {
            for (o, u) in v.iter_mut().zip(p.directions.row(l)) {
                *o += p.bias_strength * u;
            }
        }
    }
}

/// Generates images for every split (ids `{split}-{index:06}`), one caption
/// per (attribute, label, sentiment) and copy, and the oracle.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let oracle = build_oracle(spec)?;

    // Exact label counts per split, shuffled independently per attribute.
    let mut label_rng = Rng::stream(spec.seed, 1);
    let mut records = Vec::with_capacity(spec.counts.total());
    let mut global = 0u64;
    for split in Split::ALL {
        let n = spec.counts.get(split);
        let mut columns = Vec::with_capacity(spec.vocabularies.len());
        for v in &spec.vocabularies {
            let counts = exact_counts(n, &spec.proportions_of(v));
            let mut column: Vec<usize> = counts.iter().enumerate().flat_map(|(l, &c)| std::iter::repeat_n(l, c)).collect();
            label_rng.shuffle(&mut column);
            columns.push(column);
        }
        for i in 0..n {
            let labels: BTreeMap<Attribute, usize> =
                spec.vocabularies.iter().zip(&columns).map(|(v, c)| (v.attribute, c[i])).collect();
            let mut rng = Rng::stream(spec.seed, 1000 + global);
            let mut vector = base_vector(spec, &oracle, &mut rng);
            add_offsets(&mut vector, &oracle, &labels);
            let mut rec = EmbeddingRecord::new(format!("{}-{i:06}", split.name()), vector).with_split(split);
            rec.labels = labels;
            records.push(rec);
            global += 1;
        }
    }
    let images = EmbeddingSet::new(spec.d, spec.vocabularies.clone(), spec.source_tag.clone(), records)?;

    let mut caption_rng = Rng::stream(spec.seed, 2);
    let geo = spec.captions;
    let mu = oracle.context_basis.row(0).to_vec();
    let mut captions = Vec::new();
    for p in &oracle.planted {
        let attr = p.vocabulary.attribute;
        for (l, label) in p.vocabulary.labels().iter().enumerate() {
            for sentiment in Sentiment::ALL {
                for copy in 0..geo.per_label {
                    let w = oracle.context_direction(1, &mut caption_rng);
                    let vector: Vec<f64> = (0..spec.d)
                        .map(|j| geo.label_weight * p.directions.get(l, j) + geo.mean_weight * mu[j] + geo.context_weight * w[j])
                        .collect();
                    captions.push(CaptionRecord {
                        id: format!("{attr}-{label}-{}-{copy}", sentiment.name()),
                        text: format!("{} caption {copy} for {attr} = {label}", sentiment.name()),
                        vector: Some(vector),
                        attribute: attr,
                        sentiment,
                        scene: None,
                    });
                }
            }
        }
    }
    Ok(SynthOutput { images, captions, oracle })
}

/// Label recovery per attribute by projecting onto the planted directions
/// and taking the closest (largest-coefficient) label.
pub fn oracle_probe(set: &EmbeddingSet, oracle: &SynthOracle) -> Result<BTreeMap<Attribute, f64>> {
    if set.d() != oracle.d {
        return Err(Error::RecordMismatch(format!("set d = {} but oracle d = {}", set.d(), oracle.d)));
    }
    let mut out = BTreeMap::new();
    for p in &oracle.planted {
        let attr = p.vocabulary.attribute;
        match set.vocabulary(attr) {
            Some(v) if v.cardinality() == p.vocabulary.cardinality() => {}
            _ => return Err(Error::RecordMismatch(format!("vocabulary for {attr} differs from the oracle"))),
        }
        let (mut hits, mut seen) = (0usize, 0usize);
        for r in set.records() {
            if let Some(y) = r.label(attr) {
                seen += 1;
                hits += usize::from(argmax(&p.directions.matvec(&r.vector)?) == y);
            }
        }
        if seen > 0 {
            out.insert(attr, hits as f64 / seen as f64);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZeroShotSpec {
    pub name: String,
    pub classes: usize,
    pub templates: usize,
    pub per_class: usize,
    /// Length of the class direction added to each image.
    pub class_scale: f64,
    /// Weight of the random context component in each prompt vector.
    pub prompt_noise: f64,
}

impl Default for ZeroShotSpec {
    fn default() -> Self {
        Self { name: "synthetic-classes".into(), classes: 10, templates: 3, per_class: 50, class_scale: 3.0, prompt_noise: 0.3 }
    }
}

/// Classification task over the same geometry as `spec`: class directions
/// and prompt vectors lie in the context subspace (orthogonal to every
/// planted direction); images are ordinary synthetic images plus
/// `class_scale` times their class direction.
pub fn generate_zeroshot(
    spec: &SynthSpec,
    oracle: &SynthOracle,
    task: &ZeroShotSpec,
) -> Result<(ZeroShotTask, Vec<ZeroShotRecord>)> {
    spec.validate()?;
    if task.classes == 0 || task.templates == 0 || oracle.context_basis.rows() < 2 {
        return Err(Error::Infeasible("zero-shot task needs classes, templates and a context subspace".into()));
    }
    let mut rng = Rng::stream(spec.seed, 3);
    let directions: Vec<Vec<f64>> = (0..task.classes).map(|_| oracle.context_direction(1, &mut rng)).collect();
    let prompt_vectors = directions
        .iter()
        .map(|q| {
            (0..task.templates)
                .map(|_| {
                    let w = oracle.context_direction(1, &mut rng);
                    q.iter().zip(w).map(|(a, b)| a + task.prompt_noise * b).collect()
                })
                .collect()
        })
        .collect();
    let zs = ZeroShotTask {
        name: task.name.clone(),
        classes: (0..task.classes).map(|c| format!("class-{c}")).collect(),
        templates: (0..task.templates).map(|t| format!("template {t}: {{}}")).collect(),
        prompt_vectors,
    };
    let mut records = Vec::with_capacity(task.classes * task.per_class);
    for c in 0..task.classes {
        for i in 0..task.per_class {
            let index = (c * task.per_class + i) as u64;
            let mut r = Rng::stream(spec.seed, (1 << 40) + index);
            let mut vector = base_vector(spec, oracle, &mut r);
            let labels: BTreeMap<Attribute, usize> = oracle
                .planted
                .iter()
                .map(|p| (p.vocabulary.attribute, r.below(p.vocabulary.cardinality())))
                .collect();
            add_offsets(&mut vector, oracle, &labels);
            for (o, q) in vector.iter_mut().zip(&directions[c]) {
                *o += task.class_scale * q;
            }
            records.push(ZeroShotRecord { id: format!("zs-{index:06}"), vector, class: c });
        }
    }
    Ok((zs, records))
}
