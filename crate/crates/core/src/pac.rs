//! Protected attribute classifier: a shared ReLU trunk followed by one
//! two-layer head per attribute. Trained with the mean over the batch of the
//! summed per-attribute cross-entropies; frozen afterwards.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{argmax, cross_entropy, l2_normalize, softmax, AdamConfig, AdamState, Matrix, Rng};
use crate::store::{Attribute, EmbeddingRecord, EmbeddingSet, LabelVocabulary, Split};

const MAGIC: &[u8; 4] = b"FPAC";
const VERSION: u32 = 1;

/// Affine layer `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Matrix::zeros(outputs, inputs), bias: vec![0.0; outputs] }
    }

    /// Uniform in `±1/sqrt(inputs)`, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        for w in layer.weight.as_mut_slice() {
            *w = rng.uniform(-bound, bound);
        }
        layer
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    /// Batch forward: rows of `x` are inputs.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_t(&self.weight)?;
        y.add_row_vector(&self.bias);
        Ok(y)
    }
}

fn relu_in_place(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the post-ReLU activation is not positive.
fn relu_mask(grad: &mut Matrix, activation: &Matrix) {
    for (g, a) in grad.as_mut_slice().iter_mut().zip(activation.as_slice()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PacArch {
    pub hidden: usize,
    pub head_hidden: usize,
}

impl Default for PacArch {
    fn default() -> Self {
        Self { hidden: 256, head_hidden: 128 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacHead {
    pub vocabulary: LabelVocabulary,
    pub fc: Linear,
    pub out: Linear,
}

impl PacHead {
    pub fn attribute(&self) -> Attribute {
        self.vocabulary.attribute
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacModel {
    pub d: usize,
    pub arch: PacArch,
    pub trunk: Linear,
    pub heads: Vec<PacHead>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Matrix,
    trunk: Matrix,
    head_hidden: Vec<Matrix>,
    pub logits: Vec<Matrix>,
}

/// Gradients in the same layout as [`PacModel::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct PacGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl PacGrads {
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.concat()
    }
}

/// Normalized inputs with one optional label per head.
#[derive(Debug, Clone)]
pub struct PacBatch {
    pub ids: Vec<String>,
    pub inputs: Matrix,
    /// `labels[h][i]`: label of record `i` for head `h`.
    pub labels: Vec<Vec<Option<usize>>>,
}

impl PacBatch {
    /// Builds a batch for `model`'s heads, ℓ2-normalizing each vector.
    pub fn from_records(model: &PacModel, records: &[&EmbeddingRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut data = Vec::with_capacity(records.len() * model.d);
        for r in records {
            if r.vector.len() != model.d {
                return Err(Error::DimensionMismatch { id: r.id.clone(), expected: model.d, got: r.vector.len() });
            }
            data.extend(l2_normalize(&r.vector).vector);
        }
        let labels = model.heads.iter().map(|h| records.iter().map(|r| r.label(h.attribute())).collect()).collect();
        Ok(Self {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            inputs: Matrix::from_vec(records.len(), model.d, data)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PacModel {
    /// Model with every weight and bias zero.
    pub fn zeros(d: usize, vocabularies: &[LabelVocabulary], arch: PacArch) -> Self {
        Self {
            d,
            arch,
            trunk: Linear::zeros(d, arch.hidden),
            heads: vocabularies
                .iter()
                .map(|v| PacHead {
                    vocabulary: v.clone(),
                    fc: Linear::zeros(arch.hidden, arch.head_hidden),
                    out: Linear::zeros(arch.head_hidden, v.cardinality()),
                })
                .collect(),
        }
    }

    pub fn init(d: usize, vocabularies: &[LabelVocabulary], arch: PacArch, rng: &mut Rng) -> Self {
        Self {
            d,
            arch,
            trunk: Linear::init(d, arch.hidden, rng),
            heads: vocabularies
                .iter()
                .map(|v| PacHead {
                    vocabulary: v.clone(),
                    fc: Linear::init(arch.hidden, arch.head_hidden, rng),
                    out: Linear::init(arch.head_hidden, v.cardinality(), rng),
                })
                .collect(),
        }
    }

    pub fn attributes(&self) -> Vec<Attribute> {
        self.heads.iter().map(PacHead::attribute).collect()
    }

    pub fn head_index(&self, attribute: Attribute) -> Option<usize> {
        self.heads.iter().position(|h| h.attribute() == attribute)
    }

    /// Parameter tensors: trunk weight, trunk bias, then per head
    /// hidden weight, hidden bias, output weight, output bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.trunk.weight.as_slice(), self.trunk.bias.as_slice()];
        for h in &self.heads {
            out.extend([h.fc.weight.as_slice(), h.fc.bias.as_slice(), h.out.weight.as_slice(), h.out.bias.as_slice()]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.trunk.weight.as_mut_slice(), self.trunk.bias.as_mut_slice()];
        for h in &mut self.heads {
            out.push(h.fc.weight.as_mut_slice());
            out.push(h.fc.bias.as_mut_slice());
            out.push(h.out.weight.as_mut_slice());
            out.push(h.out.bias.as_mut_slice());
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|t| t.len()).sum();
        if flat.len() != total {
            return Err(Error::ShapeMismatch(format!("{} parameters for a model with {total}", flat.len())));
        }
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Logits per head for one (already normalized) input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.d {
            return Err(Error::ShapeMismatch(format!("input of length {} for d = {}", x.len(), self.d)));
        }
        let cache = self.forward_batch(&Matrix::from_vec(1, self.d, x.to_vec())?)?;
        Ok(cache.logits.into_iter().map(Matrix::into_vec).collect())
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.d {
            return Err(Error::ShapeMismatch(format!("batch with {} columns for d = {}", x.cols(), self.d)));
        }
        let mut trunk = self.trunk.forward(x)?;
        relu_in_place(&mut trunk);
        let mut head_hidden = Vec::with_capacity(self.heads.len());
        let mut logits = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let mut g = h.fc.forward(&trunk)?;
            relu_in_place(&mut g);
            logits.push(h.out.forward(&g)?);
            head_hidden.push(g);
        }
        Ok(ForwardCache { input: x.clone(), trunk, head_hidden, logits })
    }

    /// Backpropagates `dlogits` (one matrix per head). Returns the weight
    /// gradients when `weights` is set, and always the input gradient.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        dlogits: &[Matrix],
        weights: bool,
    ) -> Result<(Option<PacGrads>, Matrix)> {
        let mut dtrunk = Matrix::zeros(cache.trunk.rows(), cache.trunk.cols());
        let mut head_grads = Vec::new();
        for (i, h) in self.heads.iter().enumerate() {
            let dz = &dlogits[i];
            let g = &cache.head_hidden[i];
            let mut dg = dz.matmul(&h.out.weight)?;
            relu_mask(&mut dg, g);
            if weights {
                head_grads.push(dg.t_matmul(&cache.trunk)?.into_vec());
                head_grads.push(dg.column_sums());
                head_grads.push(dz.t_matmul(g)?.into_vec());
                head_grads.push(dz.column_sums());
            }
            let dt = dg.matmul(&h.fc.weight)?;
            for (acc, v) in dtrunk.as_mut_slice().iter_mut().zip(dt.as_slice()) {
                *acc += v;
            }
        }
        relu_mask(&mut dtrunk, &cache.trunk);
        let dx = dtrunk.matmul(&self.trunk.weight)?;
        let grads = if weights {
            let mut tensors = vec![dtrunk.t_matmul(&cache.input)?.into_vec(), dtrunk.column_sums()];
            tensors.extend(head_grads);
            Some(PacGrads { tensors })
        } else {
            None
        };
        Ok((grads, dx))
    }

    /// Predicted label per head for one raw vector (normalized here).
    pub fn predict(&self, vector: &[f64]) -> Result<Vec<usize>> {
        let logits = self.forward(&l2_normalize(vector).vector)?;
        Ok(logits.iter().map(|l| argmax(l)).collect())
    }

    pub fn freeze(self) -> FrozenPac {
        FrozenPac(self)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut w = Writer::new(w);
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u32(self.d as u32)?;
        w.u32(self.arch.hidden as u32)?;
        w.u32(self.arch.head_hidden as u32)?;
        w.u8(self.heads.len() as u8)?;
        for h in &self.heads {
            w.u8(h.attribute().code())?;
            w.u16(h.vocabulary.cardinality() as u16)?;
            for l in h.vocabulary.labels() {
                w.short_str(l)?;
            }
        }
        for t in self.tensors() {
            w.f64s(t)?;
        }
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader::new(r);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadHeader(format!("classifier checkpoint version {version}")));
        }
        let d = r.u32()? as usize;
        let arch = PacArch { hidden: r.u32()? as usize, head_hidden: r.u32()? as usize };
        if d == 0 || arch.hidden == 0 || arch.head_hidden == 0 {
            return Err(Error::BadHeader("zero layer width".into()));
        }
        let n_heads = r.u8()? as usize;
        let mut vocabs = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let code = r.u8()?;
            let attribute =
                Attribute::from_code(code).ok_or_else(|| Error::BadHeader(format!("attribute code {code}")))?;
            let n = r.u16()? as usize;
            let labels = (0..n).map(|_| r.short_str()).collect::<Result<Vec<_>>>()?;
            vocabs.push(LabelVocabulary::new(attribute, labels)?);
        }
        let mut model = Self::zeros(d, &vocabs, arch);
        for t in model.tensors_mut() {
            let values = r.f64s(t.len())?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput("classifier checkpoint".into()));
            }
            t.copy_from_slice(&values);
        }
        if !r.at_eof()? {
            return Err(Error::BadHeader("trailing bytes after classifier weights".into()));
        }
        Ok(model)
    }
}

/// A trained classifier that can no longer be modified.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPac(PacModel);

impl Deref for FrozenPac {
    type Target = PacModel;

    fn deref(&self) -> &PacModel {
        &self.0
    }
}

impl FrozenPac {
    pub fn into_inner(self) -> PacModel {
        self.0
    }
}

/// Softmax-minus-one-hot gradient of the mean summed cross-entropy.
fn ce_terms(model: &PacModel, cache: &ForwardCache, batch: &PacBatch) -> Result<(f64, Vec<Matrix>)> {
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(model.heads.len());
    for (h, logits) in cache.logits.iter().enumerate() {
        let mut dz = Matrix::zeros(logits.rows(), logits.cols());
        for (i, label) in batch.labels[h].iter().enumerate() {
            let Some(y) = *label else { continue };
            let z = logits.row(i);
            loss += cross_entropy(z, y)?;
            let row = dz.row_mut(i);
            for (g, p) in row.iter_mut().zip(softmax(z)) {
                *g = p / n;
            }
            row[y] -= 1.0 / n;
        }
        dlogits.push(dz);
    }
    Ok((loss / n, dlogits))
}

/// Mean over the batch of the summed cross-entropies of labeled attributes.
pub fn pac_loss(model: &PacModel, batch: &PacBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cache = model.forward_batch(&batch.inputs)?;
    Ok(ce_terms(model, &cache, batch)?.0)
}

/// Loss and exact gradients for every weight (ReLU subgradient 0 at 0).
pub fn pac_backward(model: &PacModel, batch: &PacBatch) -> Result<(f64, PacGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cache = model.forward_batch(&batch.inputs)?;
    let (loss, dlogits) = ce_terms(model, &cache, batch)?;
    let (grads, _) = model.backward_batch(&cache, &dlogits, true)?;
    Ok((loss, grads.expect("weight gradients requested")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PacTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Heads to train, in order; defaults to every vocabulary of the set.
    pub attributes: Option<Vec<Attribute>>,
    pub arch: PacArch,
}

impl Default for PacTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            learning_rate: 5e-3,
            epochs: 10,
            seed: 0,
            shuffle: true,
            attributes: None,
            arch: PacArch::default(),
        }
    }
}

impl PacTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.arch.hidden == 0 || self.arch.head_hidden == 0 {
            return Err(Error::Config("classifier batch size and widths must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("classifier learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: BTreeMap<Attribute, f64>,
}

/// Vocabularies selected by `attributes`, in that order (or the set's order).
pub(crate) fn select_vocabularies(set: &EmbeddingSet, attributes: Option<&[Attribute]>) -> Result<Vec<LabelVocabulary>> {
    match attributes {
        None => Ok(set.vocabularies().to_vec()),
        Some(attrs) => attrs
            .iter()
            .map(|&a| set.vocabulary(a).cloned().ok_or(Error::UnknownAttribute(a)))
            .collect(),
    }
}

/// Trains on the set's train split (every record when no split is assigned)
/// and reports validation accuracy per epoch when a val split exists.
pub fn train_pac(set: &EmbeddingSet, cfg: &PacTrainConfig) -> Result<(PacModel, Vec<PacEpoch>)> {
    cfg.validate()?;
    let vocabs = select_vocabularies(set, cfg.attributes.as_deref())?;
    if vocabs.is_empty() {
        return Err(Error::Config("classifier needs at least one attribute".into()));
    }
    let has_splits = set.records().iter().any(|r| r.split.is_some());
    let train: Vec<&EmbeddingRecord> = if has_splits {
        set.records_in(Split::Train).collect()
    } else {
        set.records().iter().collect()
    };
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if !train.iter().any(|r| vocabs.iter().any(|v| r.label(v.attribute).is_some())) {
        return Err(Error::NoLabeledRecords("train split".into()));
    }
    let val = set.subset(Split::Val);

    let mut model = PacModel::init(set.d(), &vocabs, cfg.arch, &mut Rng::stream(cfg.seed, 0));
    let adam = AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() };
    let mut states =
        model.tensors().iter().map(|t| AdamState::new(t.len(), adam)).collect::<Result<Vec<_>>>()?;
    let mut order_rng = Rng::stream(cfg.seed, 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order_rng.shuffle(&mut order);
        }
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let records: Vec<&EmbeddingRecord> = chunk.iter().map(|&i| train[i]).collect();
            let batch = PacBatch::from_records(&model, &records)?;
            let (loss, grads) = pac_backward(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { context: "classifier training".into(), batch_ids: batch.ids });
            }
            total += loss * batch.len() as f64;
            for ((param, grad), state) in model.tensors_mut().into_iter().zip(&grads.tensors).zip(&mut states) {
                state.step(param, grad)?;
            }
        }
        let val_accuracy = if val.is_empty() { BTreeMap::new() } else { pac_accuracy(&model, &val, None)? };
        let entry = PacEpoch { epoch, train_loss: total / train.len() as f64, val_accuracy };
        log::info!("classifier epoch {epoch}: loss {:.6} val {:?}", entry.train_loss, entry.val_accuracy);
        log.push(entry);
    }
    Ok((model, log))
}

/// Argmax accuracy per head over records carrying that head's label.
/// Heads with no labeled record in scope are left out.
pub fn pac_accuracy(model: &PacModel, set: &EmbeddingSet, split: Option<Split>) -> Result<BTreeMap<Attribute, f64>> {
    let records: Vec<&EmbeddingRecord> = match split {
        Some(s) => set.records_in(s).collect(),
        None => set.records().iter().collect(),
    };
    if records.is_empty() {
        return Err(Error::EmptySplit(split.map_or("all", |s| s.name()).into()));
    }
    let mut hits = vec![0usize; model.heads.len()];
    let mut seen = vec![0usize; model.heads.len()];
    for chunk in records.chunks(1024) {
        let batch = PacBatch::from_records(model, chunk)?;
        let cache = model.forward_batch(&batch.inputs)?;
        for (h, logits) in cache.logits.iter().enumerate() {
            for (i, label) in batch.labels[h].iter().enumerate() {
                if let Some(y) = *label {
                    seen[h] += 1;
                    if argmax(logits.row(i)) == y {
                        hits[h] += 1;
                    }
                }
            }
        }
    }
    Ok(model
        .heads
        .iter()
        .enumerate()
        .filter(|&(h, _)| seen[h] > 0)
        .map(|(h, head)| (head.attribute(), hits[h] as f64 / seen[h] as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradient;

    fn small_arch() -> PacArch {
        PacArch { hidden: 6, head_hidden: 5 }
    }

    #[test]
    fn zero_model_gives_uniform_loss() {
        let model = PacModel::zeros(4, &LabelVocabulary::fairface_all(), PacArch::default());
        let rec = EmbeddingRecord::new("a", vec![1.0, 2.0, 0.0, -1.0])
            .with_label(Attribute::Race, 3)
            .with_label(Attribute::Gender, 1)
            .with_label(Attribute::Age, 0);
        let batch = PacBatch::from_records(&model, &[&rec]).unwrap();
        let expected = 7f64.ln() + 2f64.ln() + 4f64.ln();
        assert!((pac_loss(&model, &batch).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 4.02535).abs() < 1e-5);
        for l in model.forward(&[0.5, 0.5, 0.5, 0.5]).unwrap() {
            assert!(l.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hand_set_two_dimensional_forward() {
        let vocab = LabelVocabulary::new(Attribute::Gender, ["a", "b"]).unwrap();
        let arch = PacArch { hidden: 2, head_hidden: 2 };
        let mut m = PacModel::zeros(2, &[vocab], arch);
        m.trunk.weight = Matrix::from_rows(&[[1.0, 2.0], [-1.0, 1.0]]).unwrap();
        m.trunk.bias = vec![0.5, 0.0];
        m.heads[0].fc.weight = Matrix::identity(2);
        m.heads[0].out.weight = Matrix::from_rows(&[[1.0, 0.0], [2.0, -3.0]]).unwrap();
        m.heads[0].out.bias = vec![0.0, 1.0];
        // x = [0.6, 0.8]: trunk = relu([0.6+1.6+0.5, -0.6+0.8]) = [2.7, 0.2]
        // logits = [2.7, 5.4 - 0.6 + 1] = [2.7, 5.8]
        let logits = m.forward(&[0.6, 0.8]).unwrap();
        assert!((logits[0][0] - 2.7).abs() < 1e-12);
        assert!((logits[0][1] - 5.8).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let vocabs = LabelVocabulary::fairface_all();
        let mut rng = Rng::new(11);
        let model = PacModel::init(8, &vocabs, small_arch(), &mut rng);
        let records: Vec<EmbeddingRecord> = (0..5)
            .map(|i| {
                let mut r = EmbeddingRecord::new(format!("r{i}"), (0..8).map(|_| rng.normal()).collect())
                    .with_label(Attribute::Race, rng.below(7))
                    .with_label(Attribute::Gender, rng.below(2));
                if i % 2 == 0 {
                    r = r.with_label(Attribute::Age, rng.below(4));
                }
                r
            })
            .collect();
        let refs: Vec<&EmbeddingRecord> = records.iter().collect();
        let batch = PacBatch::from_records(&model, &refs).unwrap();
        let (_, grads) = pac_backward(&model, &batch).unwrap();
        let mut probe = model.clone();
        let check = check_gradient(
            |p| {
                probe.set_flat_params(p).unwrap();
                pac_loss(&probe, &batch).unwrap()
            },
            &model.flat_params(),
            &grads.flatten(),
            1e-5,
        );
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn zero_inputs_give_zero_trunk_weight_gradient() {
        let mut rng = Rng::new(3);
        let vocab = LabelVocabulary::fairface(Attribute::Gender);
        let model = PacModel::init(4, &[vocab], small_arch(), &mut rng);
        let rec = EmbeddingRecord::new("z", vec![0.0; 4]).with_label(Attribute::Gender, 1);
        let batch = PacBatch::from_records(&model, &[&rec]).unwrap();
        let (_, g) = pac_backward(&model, &batch).unwrap();
        assert!(g.tensors[0].iter().all(|&v| v == 0.0));
        assert!(g.tensors.last().unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn permutation_and_duplication() {
        let mut rng = Rng::new(5);
        let vocab = LabelVocabulary::fairface(Attribute::Race);
        let model = PacModel::init(8, &[vocab], small_arch(), &mut rng);
        let recs: Vec<EmbeddingRecord> = (0..4)
            .map(|i| {
                EmbeddingRecord::new(format!("r{i}"), (0..8).map(|_| rng.normal()).collect())
                    .with_label(Attribute::Race, i)
            })
            .collect();
        let fwd: Vec<&EmbeddingRecord> = recs.iter().collect();
        let rev: Vec<&EmbeddingRecord> = recs.iter().rev().collect();
        let (la, ga) = pac_backward(&model, &PacBatch::from_records(&model, &fwd).unwrap()).unwrap();
        let (lb, gb) = pac_backward(&model, &PacBatch::from_records(&model, &rev).unwrap()).unwrap();
        assert!((la - lb).abs() < 1e-12);
        for (a, b) in ga.flatten().iter().zip(gb.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Summed (unnormalized) gradient of [r0, r0] is twice that of [r0].
        let (_, single) = pac_backward(&model, &PacBatch::from_records(&model, &[&recs[0]]).unwrap()).unwrap();
        let (_, double) =
            pac_backward(&model, &PacBatch::from_records(&model, &[&recs[0], &recs[0]]).unwrap()).unwrap();
        for (s, d) in single.flatten().iter().zip(double.flatten()) {
            assert!((2.0 * d - 2.0 * s).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = PacModel::init(5, &LabelVocabulary::fairface_all(), small_arch(), &mut Rng::new(9));
        let mut buf = Vec::new();
        model.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = PacModel::read(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert!(PacModel::read(&buf[..buf.len() - 3]).is_err());
    }
}
