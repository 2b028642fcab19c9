//! Additive residual learner.
//!
//! `phi = e + act(W e + b)` with `W`, `b` starting at zero, trained against a
//! frozen [`FrozenPac`] with
//!
//! ```text
//! L = w_recon * mean sqrt(|r|^2 + 1e-16)
//!   + w_ent   * sum_heads mean max softmax(pac(phi / |phi|))
//!   - sum_heads w_ce[h] * mean CE(pac(phi / |phi|), y_h)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{argmax, cross_entropy, dot, l2_norm, softmax, AdamConfig, AdamState, Matrix, Rng, NORM_EPSILON};
use crate::pac::FrozenPac;
use crate::store::{Attribute, EmbeddingRecord, EmbeddingSet, Split};

const MAGIC: &[u8; 4] = b"FARL";
const CHAIN_MAGIC: &[u8; 4] = b"FARC";
const VERSION: u32 = 1;

/// Smoothing inside the reconstruction norm.
pub const RECON_SMOOTHING: f64 = 1e-8;
pub const DEFAULT_CE_WEIGHT: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Identity,
    /// Exact erf form.
    Gelu,
    Tanh,
    /// Looked up by name: `relu` or `quick_gelu` (`x * sigmoid(1.702 x)`).
    Custom(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    /// Inverted dropout on the residual, training only.
    pub dropout_rate: f64,
}

impl Default for ActivationSpec {
    fn default() -> Self {
        Self { kind: ActivationKind::Identity, dropout_rate: 0.0 }
    }
}

impl ActivationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if let ActivationKind::Custom(name) = &self.kind {
            if !matches!(name.as_str(), "relu" | "quick_gelu") {
                return Err(Error::Config(format!("unknown activation `{name}`")));
            }
        }
        Ok(())
    }

    /// Value and derivative at `x`.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        match &self.kind {
            ActivationKind::Identity => (x, 1.0),
            ActivationKind::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            ActivationKind::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                (x * cdf, cdf + x * pdf)
            }
            ActivationKind::Custom(name) => match name.as_str() {
                "relu" => {
                    if x > 0.0 {
                        (x, 1.0)
                    } else {
                        (0.0, 0.0)
                    }
                }
                _ => {
                    let s = 1.0 / (1.0 + (-1.702 * x).exp());
                    (x * s, s + 1.702 * x * s * (1.0 - s))
                }
            },
        }
    }

    fn code(&self) -> u8 {
        match self.kind {
            ActivationKind::Identity => 0,
            ActivationKind::Gelu => 1,
            ActivationKind::Tanh => 2,
            ActivationKind::Custom(_) => 3,
        }
    }
}

/// One debiased vector. `phi_bar - residual` reproduces the input exactly
/// wherever `|residual| <= |input|` per coordinate, and to within one ulp of
/// `phi_bar` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct DebiasedEmbedding {
    pub id: String,
    pub phi_bar: Vec<f64>,
    pub residual: Vec<f64>,
}

/// `r` with `phi - r == e` in floating point, nudging `phi - e` by an ulp
/// when the plain difference does not round-trip.
fn exact_residual(e: &[f64], phi: &[f64]) -> Vec<f64> {
    e.iter()
        .zip(phi)
        .map(|(&e, &p)| {
            let r = p - e;
            if p - r == e {
                return r;
            }
            let (mut lo, mut hi) = (r, r);
            for _ in 0..4 {
                lo = lo.next_down();
                hi = hi.next_up();
                if p - lo == e {
                    return lo;
                }
                if p - hi == e {
                    return hi;
                }
            }
            r
        })
        .collect()
}

/// Embedding-to-embedding transform applied at inference.
pub trait Debias {
    fn dim(&self) -> usize;

    /// The debiased vector for `e`.
    fn transform(&self, e: &[f64]) -> Result<Vec<f64>>;

    fn debias(&self, id: &str, e: &[f64]) -> Result<DebiasedEmbedding> {
        let phi_bar = self.transform(e)?;
        let residual = exact_residual(e, &phi_bar);
        Ok(DebiasedEmbedding { id: id.to_string(), phi_bar, residual })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArlModel {
    pub d: usize,
    /// `d × d`, applied as `W e`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: ActivationSpec,
}

impl ArlModel {
    pub fn zeros(d: usize, activation: ActivationSpec) -> Self {
        Self { d, weight: Matrix::zeros(d, d), bias: vec![0.0; d], activation }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        [self.weight.as_slice(), self.bias.as_slice()].concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.d * self.d;
        if flat.len() != n + self.d {
            return Err(Error::ShapeMismatch(format!("{} parameters for d = {}", flat.len(), self.d)));
        }
        self.weight.as_mut_slice().copy_from_slice(&flat[..n]);
        self.bias.copy_from_slice(&flat[n..]);
        Ok(())
    }

    /// Evaluation-mode forward (no dropout).
    pub fn forward(&self, e: &[f64]) -> Result<DebiasedEmbedding> {
        self.debias("", e)
    }

    fn write_body<W: Write>(&self, w: &mut Writer<W>) -> Result<()> {
        w.u32(self.d as u32)?;
        w.u8(self.activation.code())?;
        if let ActivationKind::Custom(name) = &self.activation.kind {
            w.short_str(name)?;
        }
        w.f64(self.activation.dropout_rate)?;
        w.f64s(self.weight.as_slice())?;
        w.f64s(&self.bias)
    }

    fn read_body<R: Read>(r: &mut Reader<R>) -> Result<Self> {
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(Error::BadHeader("residual learner with d = 0".into()));
        }
        let kind = match r.u8()? {
            0 => ActivationKind::Identity,
            1 => ActivationKind::Gelu,
            2 => ActivationKind::Tanh,
            3 => ActivationKind::Custom(r.short_str()?),
            c => return Err(Error::BadHeader(format!("activation code {c}"))),
        };
        let activation = ActivationSpec { kind, dropout_rate: r.f64()? };
        activation.validate()?;
        let weight = Matrix::from_vec(d, d, r.f64s(d * d)?)?;
        let bias = r.f64s(d)?;
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFiniteInput("residual learner bias".into()));
        }
        Ok(Self { d, weight, bias, activation })
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut w = Writer::new(w);
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        self.write_body(&mut w)?;
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader::new(r);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadHeader(format!("residual learner version {version}")));
        }
        let model = Self::read_body(&mut r)?;
        if !r.at_eof()? {
            return Err(Error::BadHeader("trailing bytes after residual learner".into()));
        }
        Ok(model)
    }
}

impl Debias for ArlModel {
    fn dim(&self) -> usize {
        self.d
    }

    fn transform(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.d {
            return Err(Error::ShapeMismatch(format!("input of length {} for d = {}", e.len(), self.d)));
        }
        let pre = self.weight.matvec(e)?;
        Ok(e.iter()
            .zip(pre)
            .zip(&self.bias)
            .map(|((&x, p), b)| {
                let s = self.activation.eval(p + b).0;
                // Adding an exact zero keeps the input bits (including -0.0).
                if s == 0.0 {
                    x
                } else {
                    x + s
                }
            })
            .collect())
    }
}

/// Single-attribute learners applied one after the other.
#[derive(Debug, Clone, PartialEq)]
pub struct ArlChain {
    pub stages: Vec<(Attribute, ArlModel)>,
}

impl ArlChain {
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut w = Writer::new(w);
        w.bytes(CHAIN_MAGIC)?;
        w.u32(VERSION)?;
        w.u8(self.stages.len() as u8)?;
        for (attr, model) in &self.stages {
            w.u8(attr.code())?;
            model.write_body(&mut w)?;
        }
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader::new(r);
        r.magic(CHAIN_MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadHeader(format!("learner chain version {version}")));
        }
        let n = r.u8()?;
        let mut stages = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let code = r.u8()?;
            let attr = Attribute::from_code(code).ok_or_else(|| Error::BadHeader(format!("attribute code {code}")))?;
            stages.push((attr, ArlModel::read_body(&mut r)?));
        }
        if stages.windows(2).any(|w| w[0].1.d != w[1].1.d) {
            return Err(Error::BadHeader("chain stages disagree on d".into()));
        }
        if !r.at_eof()? {
            return Err(Error::BadHeader("trailing bytes after learner chain".into()));
        }
        Ok(Self { stages })
    }
}

impl Debias for ArlChain {
    fn dim(&self) -> usize {
        self.stages.first().map_or(0, |(_, m)| m.d)
    }

    fn transform(&self, e: &[f64]) -> Result<Vec<f64>> {
        let mut v = e.to_vec();
        for (_, m) in &self.stages {
            v = m.transform(&v)?;
        }
        Ok(v)
    }
}

/// Debiased copy of `set` (labels, scenes and splits kept, order preserved)
/// plus the per-record residuals keyed by id.
pub fn debias_set(model: &dyn Debias, set: &EmbeddingSet) -> Result<(EmbeddingSet, Vec<(String, Vec<f64>)>)> {
    if model.dim() != set.d() {
        return Err(Error::ShapeMismatch(format!("learner d = {} for a set with d = {}", model.dim(), set.d())));
    }
    let mut records = Vec::with_capacity(set.len());
    let mut residuals = Vec::with_capacity(set.len());
    for r in set.records() {
        let out = model.debias(&r.id, &r.vector)?;
        residuals.push((out.id, out.residual));
        records.push(EmbeddingRecord { vector: out.phi_bar, ..r.clone() });
    }
    Ok((set.with_records(records)?, residuals))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArlLossWeights {
    pub recon: f64,
    pub ent: f64,
    /// Per attribute; attributes not listed use [`DEFAULT_CE_WEIGHT`].
    pub ce: BTreeMap<Attribute, f64>,
}

impl Default for ArlLossWeights {
    fn default() -> Self {
        Self { recon: 1.0, ent: 1.0, ce: Attribute::ALL.iter().map(|&a| (a, DEFAULT_CE_WEIGHT)).collect() }
    }
}

impl ArlLossWeights {
    pub fn ce_weight(&self, attribute: Attribute) -> f64 {
        self.ce.get(&attribute).copied().unwrap_or(DEFAULT_CE_WEIGHT)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if ok(self.recon) && ok(self.ent) && self.ce.values().all(|&w| ok(w)) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// Loss value with its components (entropy and CE per head, unweighted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArlLoss {
    pub total: f64,
    pub recon: f64,
    pub ent: BTreeMap<Attribute, f64>,
    pub ce: BTreeMap<Attribute, f64>,
}

/// Raw inputs with labels for each head of the classifier.
#[derive(Debug, Clone)]
pub struct ArlBatch {
    pub ids: Vec<String>,
    pub inputs: Matrix,
    pub labels: Vec<Vec<Option<usize>>>,
}

impl ArlBatch {
    pub fn from_records(pac: &FrozenPac, records: &[&EmbeddingRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let rows: Vec<&[f64]> = records.iter().map(|r| r.vector.as_slice()).collect();
        for r in records {
            if r.vector.len() != pac.d {
                return Err(Error::DimensionMismatch { id: r.id.clone(), expected: pac.d, got: r.vector.len() });
            }
        }
        Ok(Self {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            inputs: Matrix::from_rows(&rows)?,
            labels: pac.heads.iter().map(|h| records.iter().map(|r| r.label(h.attribute())).collect()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients with respect to `W` (row-major `d × d`) and `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArlGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ArlGrads {
    pub fn flatten(&self) -> Vec<f64> {
        [self.weight.as_slice(), self.bias.as_slice()].concat()
    }
}

/// Dropout multipliers (already scaled by `1 / (1 - p)`), or `None`.
fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: Option<&mut Rng>) -> Option<Vec<f64>> {
    let rng = rng?;
    if rate == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some((0..rows * cols).map(|_| if rng.next_f64() < rate { 0.0 } else { keep }).collect())
}

fn loss_and_grads(
    arl: &ArlModel,
    pac: &FrozenPac,
    batch: &ArlBatch,
    weights: &ArlLossWeights,
    dropout: Option<&mut Rng>,
    want_grads: bool,
) -> Result<(ArlLoss, Option<ArlGrads>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.inputs.cols() != arl.d || pac.d != arl.d {
        return Err(Error::ShapeMismatch(format!(
            "batch d = {}, learner d = {}, classifier d = {}",
            batch.inputs.cols(),
            arl.d,
            pac.d
        )));
    }
    let (n, d) = (batch.len(), arl.d);
    let nf = n as f64;

    let mut pre = batch.inputs.matmul_t(&arl.weight)?;
    pre.add_row_vector(&arl.bias);
    let mask = dropout_mask(n, d, arl.activation.dropout_rate, dropout);
    let mut residual = Matrix::zeros(n, d);
    let mut act_grad = Matrix::zeros(n, d);
    for (k, (p, (r, g))) in pre
        .as_slice()
        .iter()
        .zip(residual.as_mut_slice().iter_mut().zip(act_grad.as_mut_slice().iter_mut()))
        .enumerate()
    {
        let (v, dv) = arl.activation.eval(*p);
        let m = mask.as_ref().map_or(1.0, |m| m[k]);
        *r = v * m;
        *g = dv * m;
    }

    // phi, its norms and the normalized classifier input.
    let mut x = Matrix::zeros(n, d);
    let mut norms = vec![0.0; n];
    let mut recon_norms = vec![0.0; n];
    for i in 0..n {
        let phi: Vec<f64> = batch.inputs.row(i).iter().zip(residual.row(i)).map(|(e, r)| e + r).collect();
        let norm = l2_norm(&phi);
        norms[i] = norm;
        let scale = if norm > NORM_EPSILON { 1.0 / norm } else { 1.0 };
        for (o, v) in x.row_mut(i).iter_mut().zip(&phi) {
            *o = v * scale;
        }
        recon_norms[i] = (dot(residual.row(i), residual.row(i)) + RECON_SMOOTHING * RECON_SMOOTHING).sqrt();
    }
    let recon = recon_norms.iter().sum::<f64>() / nf;

    let cache = pac.forward_batch(&x)?;
    let mut ent = BTreeMap::new();
    let mut ce = BTreeMap::new();
    let mut total = weights.recon * recon;
    let mut dlogits = Vec::with_capacity(pac.heads.len());
    for (h, head) in pac.heads.iter().enumerate() {
        let attr = head.attribute();
        let w_ce = weights.ce_weight(attr);
        let logits = &cache.logits[h];
        let mut dz = Matrix::zeros(n, logits.cols());
        let (mut ent_sum, mut ce_sum) = (0.0, 0.0);
        for i in 0..n {
            let z = logits.row(i);
            let p = softmax(z);
            let a = argmax(&p);
            ent_sum += p[a];
            let row = dz.row_mut(i);
            // d max_softmax / dz_k = p_a (delta_ak - p_k)
            for (k, g) in row.iter_mut().enumerate() {
                let delta = if k == a { 1.0 } else { 0.0 };
                *g = weights.ent * p[a] * (delta - p[k]) / nf;
            }
            if let Some(y) = batch.labels[h][i] {
                ce_sum += cross_entropy(z, y)?;
                for (k, g) in row.iter_mut().enumerate() {
                    let onehot = if k == y { 1.0 } else { 0.0 };
                    *g -= w_ce * (p[k] - onehot) / nf;
                }
            }
        }
        let (l_ent, l_ce) = (ent_sum / nf, ce_sum / nf);
        total += weights.ent * l_ent - w_ce * l_ce;
        ent.insert(attr, l_ent);
        ce.insert(attr, l_ce);
        dlogits.push(dz);
    }
    let loss = ArlLoss { total, recon, ent, ce };
    if !want_grads {
        return Ok((loss, None));
    }

    let (_, dx) = pac.backward_batch(&cache, &dlogits, false)?;
    let mut dpre = Matrix::zeros(n, d);
    for i in 0..n {
        let xi = x.row(i);
        let gi = dx.row(i);
        let (proj, scale) = if norms[i] > NORM_EPSILON { (dot(xi, gi), 1.0 / norms[i]) } else { (0.0, 1.0) };
        let rscale = weights.recon / (nf * recon_norms[i]);
        let r = residual.row(i).to_vec();
        let ag = act_grad.row(i).to_vec();
        for (j, out) in dpre.row_mut(i).iter_mut().enumerate() {
            // Jacobian of x = phi / |phi| is (I - x x^T) / |phi|.
            let dphi = (gi[j] - xi[j] * proj) * scale;
            *out = (dphi + rscale * r[j]) * ag[j];
        }
    }
    let grads = ArlGrads { weight: dpre.t_matmul(&batch.inputs)?.into_vec(), bias: dpre.column_sums() };
    Ok((loss, Some(grads)))
}

/// Loss in evaluation mode.
pub fn arl_loss(arl: &ArlModel, pac: &FrozenPac, batch: &ArlBatch, weights: &ArlLossWeights) -> Result<ArlLoss> {
    Ok(loss_and_grads(arl, pac, batch, weights, None, false)?.0)
}

/// Loss and exact gradients for `W` and `b` in evaluation mode. The
/// classifier receives no gradient.
pub fn arl_backward(
    arl: &ArlModel,
    pac: &FrozenPac,
    batch: &ArlBatch,
    weights: &ArlLossWeights,
) -> Result<(ArlLoss, ArlGrads)> {
    let (loss, grads) = loss_and_grads(arl, pac, batch, weights, None, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { patience: 5, min_delta: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArlTrainConfig {
    pub weights: ArlLossWeights,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub early_stop: EarlyStop,
    pub activation: ActivationSpec,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for ArlTrainConfig {
    fn default() -> Self {
        Self {
            weights: ArlLossWeights::default(),
            batch_size: 512,
            learning_rate: 5e-4,
            weight_decay: 2e-2,
            epochs: 30,
            early_stop: EarlyStop::default(),
            activation: ActivationSpec::default(),
            shuffle: true,
            seed: 0,
        }
    }
}

impl ArlTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.activation.validate()?;
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("learner batch size must be positive".into()));
        }
        if !(self.early_stop.min_delta >= 0.0 && self.early_stop.min_delta.is_finite()) {
            return Err(Error::Config(format!("early-stop min_delta {}", self.early_stop.min_delta)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArlEpoch {
    /// 0 is the untrained (zero) model.
    pub epoch: usize,
    /// Mean over training batches, weighted by batch size; `None` at epoch 0.
    pub train: Option<ArlLoss>,
    pub val: ArlLoss,
    /// Set when this epoch's model became the returned checkpoint.
    pub best: bool,
}

fn train_and_val(set: &EmbeddingSet) -> Result<(Vec<&EmbeddingRecord>, Vec<&EmbeddingRecord>)> {
    let train: Vec<_> = set.records_in(Split::Train).collect();
    let val: Vec<_> = set.records_in(Split::Val).collect();
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    Ok((train, val))
}

/// Trains on the train split with Adam and decoupled weight decay, monitoring
/// the total loss on the val split. Returns the checkpoint with the lowest
/// validation loss seen (the zero model counts) and the per-epoch log.
pub fn train_arl(set: &EmbeddingSet, pac: &FrozenPac, cfg: &ArlTrainConfig) -> Result<(ArlModel, Vec<ArlEpoch>)> {
    cfg.validate()?;
    if pac.d != set.d() {
        return Err(Error::ShapeMismatch(format!("classifier d = {} for a set with d = {}", pac.d, set.d())));
    }
    let (train, val) = train_and_val(set)?;
    let val_batch = ArlBatch::from_records(pac, &val)?;

    let mut model = ArlModel::zeros(set.d(), cfg.activation.clone());
    let initial = arl_loss(&model, pac, &val_batch, &cfg.weights)?;
    if !initial.total.is_finite() {
        return Err(Error::NonFiniteLoss { context: "initial validation loss".into(), batch_ids: val_batch.ids });
    }
    let mut best = (initial.total, model.clone());
    let mut reference = initial.total;
    let mut waited = 0;
    let mut log = vec![ArlEpoch { epoch: 0, train: None, val: initial, best: true }];

    let mut w_state = AdamState::new(set.d() * set.d(), cfg.adam())?;
    let mut b_state = AdamState::new(set.d(), cfg.adam())?;
    let mut order_rng = Rng::stream(cfg.seed, 2);
    let mut dropout_rng = Rng::stream(cfg.seed, 3);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order_rng.shuffle(&mut order);
        }
        let mut sums = ArlLoss { total: 0.0, recon: 0.0, ent: BTreeMap::new(), ce: BTreeMap::new() };
        for chunk in order.chunks(cfg.batch_size) {
            let records: Vec<&EmbeddingRecord> = chunk.iter().map(|&i| train[i]).collect();
            let batch = ArlBatch::from_records(pac, &records)?;
            let (loss, grads) = loss_and_grads(&model, pac, &batch, &cfg.weights, Some(&mut dropout_rng), true)?;
            let grads = grads.expect("gradients requested");
            let finite = loss.total.is_finite() && grads.weight.iter().chain(&grads.bias).all(|g| g.is_finite());
            if !finite {
                return Err(Error::NonFiniteLoss { context: format!("learner epoch {epoch}"), batch_ids: batch.ids });
            }
            let w = batch.len() as f64;
            sums.total += w * loss.total;
            sums.recon += w * loss.recon;
            for (a, v) in &loss.ent {
                *sums.ent.entry(*a).or_default() += w * v;
            }
            for (a, v) in &loss.ce {
                *sums.ce.entry(*a).or_default() += w * v;
            }
            w_state.step(model.weight.as_mut_slice(), &grads.weight)?;
            b_state.step(&mut model.bias, &grads.bias)?;
        }
        let n = train.len() as f64;
        sums.total /= n;
        sums.recon /= n;
        sums.ent.values_mut().chain(sums.ce.values_mut()).for_each(|v| *v /= n);

        let val_loss = arl_loss(&model, pac, &val_batch, &cfg.weights)?;
        if !val_loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("learner validation, epoch {epoch}"),
                batch_ids: val_batch.ids,
            });
        }
        let is_best = val_loss.total < best.0;
        if is_best {
            best = (val_loss.total, model.clone());
        }
        if val_loss.total < reference - cfg.early_stop.min_delta {
            reference = val_loss.total;
            waited = 0;
        } else {
            waited += 1;
        }
        log::info!(
            "learner epoch {epoch}: train {:.6} val {:.6} recon {:.6}",
            sums.total,
            val_loss.total,
            val_loss.recon
        );
        log.push(ArlEpoch { epoch, train: Some(sums), val: val_loss, best: is_best });
        if waited >= cfg.early_stop.patience {
            log::info!("learner early stop after epoch {epoch}");
            break;
        }
    }
    Ok((best.1, log))
}

/// Trains one learner per attribute in `order`, each against its own
/// classifier and on the output of the previous stages.
pub fn train_arl_sequential(
    set: &EmbeddingSet,
    pacs: &BTreeMap<Attribute, FrozenPac>,
    order: &[Attribute],
    cfg: &ArlTrainConfig,
) -> Result<(ArlChain, Vec<Vec<ArlEpoch>>)> {
    for a in order {
        if !pacs.contains_key(a) {
            return Err(Error::UnknownAttribute(*a));
        }
    }
    let mut current = set.clone();
    let mut chain = ArlChain { stages: Vec::with_capacity(order.len()) };
    let mut logs = Vec::with_capacity(order.len());
    for attr in order {
        log::info!("sequential stage: {attr}");
        let (model, log) = train_arl(&current, &pacs[attr], cfg)?;
        current = debias_set(&model, &current)?.0;
        chain.stages.push((*attr, model));
        logs.push(log);
    }
    Ok((chain, logs))
}
