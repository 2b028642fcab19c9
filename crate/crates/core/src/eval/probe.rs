use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky_solve, dot, Matrix, Rng};
use crate::store::{Attribute, EmbeddingSet};

/// An image-difference vector and the text-difference vector it should map to.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePair {
    pub image_diff: Vec<f64>,
    pub text_diff: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub ridge: f64,
    /// Fraction of pairs held out for the reported statistic.
    pub holdout: f64,
    pub pairs: usize,
    pub repetitions: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { ridge: 1e-8, holdout: 0.2, pairs: 2000, repetitions: 100 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) || !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!("invalid probe settings {self:?}")));
        }
        Ok(())
    }
}

/// `text_diff ≈ k · image_diff + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub k: Matrix,
    pub intercept: Vec<f64>,
    /// `Σ|pred - target|² / Σ|target|²` over held-out pairs (0 when every
    /// target is zero).
    pub relative_mse: f64,
    pub train_relative_mse: f64,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
}

impl ProbeModel {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.k.matvec(x)?;
        for (v, b) in y.iter_mut().zip(&self.intercept) {
            *v += b;
        }
        Ok(y)
    }

    pub fn relative_mse_on(&self, pairs: &[ProbePair]) -> Result<f64> {
        let (mut err, mut norm) = (0.0, 0.0);
        for p in pairs {
            let pred = self.predict(&p.image_diff)?;
            err += pred.iter().zip(&p.text_diff).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            norm += dot(&p.text_diff, &p.text_diff);
        }
        Ok(if norm == 0.0 { 0.0 } else { err / norm })
    }
}

fn column_means(rows: &[&[f64]], width: usize) -> Vec<f64> {
    let mut mean = vec![0.0; width];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    mean
}

/// Least-squares fit on the first `1 - holdout` of `pairs` via centered
/// normal equations with ridge `cfg.ridge`; the statistic is measured on the
/// remaining pairs (on the training pairs when none are held out).
pub fn fit_probe(pairs: &[ProbePair], cfg: &ProbeConfig) -> Result<ProbeModel> {
    cfg.validate()?;
    let first = pairs.first().ok_or(Error::EmptyBatch)?;
    let (dx, dy) = (first.image_diff.len(), first.text_diff.len());
    if dx == 0 || dy == 0 || pairs.iter().any(|p| p.image_diff.len() != dx || p.text_diff.len() != dy) {
        return Err(Error::ShapeMismatch("probe pairs of inconsistent width".into()));
    }
    if pairs.iter().any(|p| p.image_diff.iter().chain(&p.text_diff).any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteInput("probe pairs".into()));
    }
    let n_train = ((pairs.len() as f64) * (1.0 - cfg.holdout)).round().max(1.0) as usize;
    let (train, heldout) = pairs.split_at(n_train.min(pairs.len()));
    if train.iter().all(|p| p.image_diff.iter().all(|&v| v == 0.0)) {
        return Err(Error::DegenerateVector("every probe input is zero".into()));
    }

    let xs: Vec<&[f64]> = train.iter().map(|p| p.image_diff.as_slice()).collect();
    let ys: Vec<&[f64]> = train.iter().map(|p| p.text_diff.as_slice()).collect();
    let (x_mean, y_mean) = (column_means(&xs, dx), column_means(&ys, dy));
    let center = |rows: &[&[f64]], mean: &[f64]| {
        let data = rows.iter().flat_map(|r| r.iter().zip(mean).map(|(v, m)| v - m)).collect();
        Matrix::from_vec(rows.len(), mean.len(), data)
    };
    let (x, y) = (center(&xs, &x_mean)?, center(&ys, &y_mean)?);

    let mut gram = x.t_matmul(&x)?;
    // The ridge is floored so that rank-deficient inputs still factor.
    let ridge = cfg.ridge.max(f64::MIN_POSITIVE);
    for i in 0..dx {
        gram.set(i, i, gram.get(i, i) + ridge);
    }
    let solution = cholesky_solve(&gram, &x.t_matmul(&y)?)?; // dx × dy
    let k = solution.transpose();
    let kx = k.matvec(&x_mean)?;
    let intercept: Vec<f64> = y_mean.iter().zip(kx).map(|(m, p)| m - p).collect();

    let mut model = ProbeModel {
        k,
        intercept,
        relative_mse: 0.0,
        train_relative_mse: 0.0,
        train_pairs: train.len(),
        heldout_pairs: heldout.len(),
    };
    model.train_relative_mse = model.relative_mse_on(train)?;
    model.relative_mse = if heldout.is_empty() { model.train_relative_mse } else { model.relative_mse_on(heldout)? };
    Ok(model)
}

/// Something that can draw fresh probe pairs.
pub trait PairSource {
    fn sample(&mut self, n: usize, rng: &mut Rng) -> Result<Vec<ProbePair>>;
}

/// Gaussian inputs mapped exactly (plus optional noise) through a known map.
#[derive(Debug, Clone)]
pub struct LinearPairSource {
    pub k: Matrix,
    pub intercept: Vec<f64>,
    pub noise: f64,
}

impl LinearPairSource {
    /// Random `d × d` map with N(0, 1/d) entries and N(0, 1) intercept.
    pub fn random(d: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        let data = (0..d * d).map(|_| scale * rng.normal()).collect();
        let k = Matrix::from_vec(d, d, data).expect("finite entries");
        Self { k, intercept: (0..d).map(|_| rng.normal()).collect(), noise: 0.0 }
    }
}

impl PairSource for LinearPairSource {
    fn sample(&mut self, n: usize, rng: &mut Rng) -> Result<Vec<ProbePair>> {
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..self.k.cols()).map(|_| rng.normal()).collect();
                let mut y = self.k.matvec(&x)?;
                for (v, b) in y.iter_mut().zip(&self.intercept) {
                    *v += b + self.noise * rng.normal();
                }
                Ok(ProbePair { image_diff: x, text_diff: y })
            })
            .collect()
    }
}

/// Inputs and targets drawn independently.
#[derive(Debug, Clone, Copy)]
pub struct NoisePairSource {
    pub d: usize,
}

impl PairSource for NoisePairSource {
    fn sample(&mut self, n: usize, rng: &mut Rng) -> Result<Vec<ProbePair>> {
        Ok((0..n)
            .map(|_| ProbePair {
                image_diff: (0..self.d).map(|_| rng.normal()).collect(),
                text_diff: (0..self.d).map(|_| rng.normal()).collect(),
            })
            .collect())
    }
}

/// Differences between two images with different labels of `attribute`,
/// paired with the difference of the per-label text vectors.
#[derive(Debug, Clone)]
pub struct LabelPairSource {
    pub images: EmbeddingSet,
    pub attribute: Attribute,
    /// One text vector per label index.
    pub texts: Vec<Vec<f64>>,
}

impl PairSource for LabelPairSource {
    fn sample(&mut self, n: usize, rng: &mut Rng) -> Result<Vec<ProbePair>> {
        let labeled: Vec<(usize, &[f64])> = self
            .images
            .records()
            .iter()
            .filter_map(|r| r.label(self.attribute).map(|l| (l, r.vector.as_slice())))
            .collect();
        if labeled.len() < 2 {
            return Err(Error::NoLabeledRecords(format!("{} probe pairs", self.attribute)));
        }
        if self.texts.len() <= labeled.iter().map(|p| p.0).max().unwrap_or(0) {
            return Err(Error::ShapeMismatch("fewer text vectors than labels".into()));
        }
        if labeled.iter().all(|p| p.0 == labeled[0].0) {
            return Err(Error::NoLabeledRecords(format!("{} has a single label", self.attribute)));
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let (a, b) = (labeled[rng.below(labeled.len())], labeled[rng.below(labeled.len())]);
            if a.0 == b.0 {
                continue;
            }
            out.push(ProbePair {
                image_diff: a.1.iter().zip(b.1).map(|(x, y)| x - y).collect(),
                text_diff: self.texts[a.0].iter().zip(&self.texts[b.0]).map(|(x, y)| x - y).collect(),
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub repetitions: usize,
    pub max_relative_mse: f64,
    pub mean_relative_mse: f64,
    pub per_repetition: Vec<f64>,
}

/// Fits `cfg.repetitions` probes, each on `cfg.pairs` fresh pairs drawn with
/// the substream `(seed, repetition)`.
pub fn repeat_probe(source: &mut dyn PairSource, cfg: &ProbeConfig, seed: u64) -> Result<ProbeSummary> {
    if cfg.repetitions == 0 {
        return Err(Error::Config("probe repetitions must be positive".into()));
    }
    let mut per_repetition = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let pairs = source.sample(cfg.pairs, &mut Rng::stream(seed, rep as u64))?;
        per_repetition.push(fit_probe(&pairs, cfg)?.relative_mse);
    }
    Ok(ProbeSummary {
        repetitions: cfg.repetitions,
        max_relative_mse: per_repetition.iter().copied().fold(0.0, f64::max),
        mean_relative_mse: per_repetition.iter().sum::<f64>() / cfg.repetitions as f64,
        per_repetition,
    })
}
